//! Row-batched Poincaré-ball operations recorded on a [`Graph`].
//!
//! Every function treats each row of its input as one point (or tangent
//! vector) and mirrors the scalar kernels in [`crate::hypmath`].

use crate::error::Result;
use crate::hypmath::{PoincareBall, RadialMap, VolumeWeighting};

use super::graph::{Graph, Var};

pub fn exp0(g: &mut Graph, v: Var, ball: &PoincareBall) -> Var {
    let raw = g.radial(v, RadialMap::Exp0 { c: ball.c() });
    clip(g, raw, ball)
}

/// `exp0` without the final clip, for callers that count clipping themselves.
pub fn exp0_unclipped(g: &mut Graph, v: Var, ball: &PoincareBall) -> Var {
    g.radial(v, RadialMap::Exp0 { c: ball.c() })
}

pub fn log0(g: &mut Graph, h: Var, ball: &PoincareBall) -> Var {
    g.radial(h, RadialMap::Log0 { c: ball.c() })
}

pub fn clip(g: &mut Graph, h: Var, ball: &PoincareBall) -> Var {
    g.radial(
        h,
        RadialMap::Clip {
            max_norm: ball.max_norm(),
        },
    )
}

/// Clips each row to Euclidean norm at most `max_norm`.
pub fn clip_norm(g: &mut Graph, v: Var, max_norm: f64) -> Var {
    g.radial(v, RadialMap::Clip { max_norm })
}

/// Distance-preserving transport between balls of different curvature.
pub fn rescale(g: &mut Graph, h: Var, from: &PoincareBall, to: &PoincareBall) -> Var {
    if from.c() == to.c() {
        return h;
    }
    let moved = g.radial(
        h,
        RadialMap::Rescale {
            c_from: from.c(),
            c_to: to.c(),
        },
    );
    clip(g, moved, to)
}

fn row_dot(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let p = g.mul(a, b)?;
    Ok(g.sum_rows(p))
}

pub fn mobius_add(g: &mut Graph, x: Var, y: Var, c: f64) -> Result<Var> {
    let xy = row_dot(g, x, y)?;
    let x2 = row_dot(g, x, x)?;
    let y2 = row_dot(g, y, y)?;
    // a = 1 + 2c<x,y> + c|y|², b = 1 − c|x|²
    let two_xy = g.scale(xy, 2.0 * c);
    let cy2 = g.scale(y2, c);
    let a0 = g.add(two_xy, cy2)?;
    let a = g.offset(a0, 1.0);
    let cx2 = g.scale(x2, -c);
    let b = g.offset(cx2, 1.0);
    let ax = g.mul(a, x)?;
    let by = g.mul(b, y)?;
    let num = g.add(ax, by)?;
    // den = 1 + 2c<x,y> + c²|x|²|y|²
    let x2y2 = g.mul(x2, y2)?;
    let cc = g.scale(x2y2, c * c);
    let d0 = g.add(two_xy, cc)?;
    let den = g.offset(d0, 1.0);
    g.div(num, den)
}

/// Per-row Poincaré distance, shape `r×1`.
pub fn dist(g: &mut Graph, x: Var, y: Var, c: f64) -> Result<Var> {
    let neg_x = g.neg(x);
    let m = mobius_add(g, neg_x, y, c)?;
    let n = g.row_norm(m);
    let arg = g.scale(n, c.sqrt());
    let at = g.artanh(arg);
    Ok(g.scale(at, 2.0 / c.sqrt()))
}

/// Per-row importance weight `(1 − c‖h‖²)^{∓n}`, shape `r×1`.
pub fn volume_weight(g: &mut Graph, h: Var, c: f64, weighting: VolumeWeighting) -> Var {
    let n = g.shape(h).1 as f64;
    let sq = g.square(h);
    let r2 = g.sum_rows(sq);
    let neg = g.scale(r2, -c);
    let base = g.offset(neg, 1.0);
    let lnb = g.ln(base);
    let power = match weighting {
        VolumeWeighting::Density => -n,
        VolumeWeighting::InverseDensity => n,
    };
    let scaled = g.scale(lnb, power);
    g.exp(scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypmath::{self, TangentVector};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    #[test]
    fn batched_ops_match_scalar_kernels() {
        let ball = PoincareBall::new(0.8).unwrap();
        let xs = array![[0.3, -0.2, 0.1], [0.0, 0.0, 0.0], [-0.5, 0.4, 0.3]];
        let ys = array![[-0.1, 0.5, 0.2], [0.2, 0.2, -0.1], [0.4, 0.1, -0.6]];
        let mut g = Graph::new();
        let x = g.constant(xs.clone());
        let y = g.constant(ys.clone());
        let d = dist(&mut g, x, y, ball.c()).unwrap();
        let m = mobius_add(&mut g, x, y, ball.c()).unwrap();
        let l = log0(&mut g, x, &ball);
        let e = exp0(&mut g, l, &ball);
        let w = volume_weight(&mut g, x, ball.c(), VolumeWeighting::Density);
        for i in 0..3 {
            let xp = ball.point(xs.row(i).to_vec()).unwrap();
            let yp = ball.point(ys.row(i).to_vec()).unwrap();
            assert_abs_diff_eq!(g.value(d)[[i, 0]], ball.dist(&xp, &yp).unwrap(), epsilon = 1e-14);
            let ms = hypmath::mobius_add_raw(xp.coords(), yp.coords(), ball.c());
            for j in 0..3 {
                assert_abs_diff_eq!(g.value(m)[[i, j]], ms[j], epsilon = 1e-15);
                assert_abs_diff_eq!(g.value(e)[[i, j]], xs[[i, j]], epsilon = 1e-14);
            }
            assert_abs_diff_eq!(
                g.value(w)[[i, 0]],
                ball.volume_weight(&xp, VolumeWeighting::Density).unwrap(),
                epsilon = 1e-12
            );
        }
        let v = TangentVector::new(vec![2.0, 1.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let vv = g.constant(Array2::from_shape_vec((1, 3), v.coords().to_vec()).unwrap());
        let h = exp0(&mut g, vv, &ball);
        let expect = ball.exp0(&v).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(g.value(h)[[0, j]], expect.coords()[j], epsilon = 1e-15);
        }
    }
}
