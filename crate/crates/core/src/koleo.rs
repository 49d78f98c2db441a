//! Kozachenko–Leonenko entropy regularizer.
//!
//! `L = −(1/n) Σᵢ log ρᵢ` where `ρᵢ` is the distance from row `i` to its
//! nearest other row in the batch. Minimizing it pushes rows apart, spreading
//! a batch of unit vectors over the sphere.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Index of each row's nearest other row (lowest index on ties) and the
/// distance to it.
pub fn nearest_neighbors(x: ArrayView2<f64>) -> Result<Vec<(usize, f64)>> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("need at least 2 rows, got {n}")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let xi = x.row(i);
        let mut best = (usize::MAX, f64::INFINITY);
        for j in 0..n {
            if j == i {
                continue;
            }
            let d2: f64 = xi.iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (j, d2);
            }
        }
        if best.1 == 0.0 {
            return Err(Error::DegenerateBatch(format!(
                "rows {i} and {} coincide; log of zero distance is undefined",
                best.0
            )));
        }
        out.push((best.0, best.1.sqrt()));
    }
    Ok(out)
}

pub fn koleo_loss(x: ArrayView2<f64>) -> Result<f64> {
    let nn = nearest_neighbors(x)?;
    Ok(-nn.iter().map(|(_, rho)| rho.ln()).sum::<f64>() / x.nrows() as f64)
}

/// Gradient of [`koleo_loss`] with respect to every row. Each term flows into
/// both its anchor row and the neighbor that achieved the minimum.
pub fn koleo_grad(x: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(koleo_loss_and_grad(x)?.1)
}

pub fn koleo_loss_and_grad(x: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let n = x.nrows();
    let nn = nearest_neighbors(x)?;
    let mut grad = Array2::<f64>::zeros(x.raw_dim());
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for (i, &(j, rho)) in nn.iter().enumerate() {
        loss -= rho.ln();
        let scale = inv_n / (rho * rho);
        let diff = &x.row(i) - &x.row(j);
        // d/dxᵢ of −log‖xᵢ−xⱼ‖ is −(xᵢ−xⱼ)/‖xᵢ−xⱼ‖².
        grad.row_mut(i).scaled_add(-scale, &diff);
        grad.row_mut(j).scaled_add(scale, &diff);
    }
    Ok((loss * inv_n, grad))
}

/// Mean over rows of the nearest-neighbor distance; larger means more uniform.
pub fn mean_min_distance(x: ArrayView2<f64>) -> Result<f64> {
    let nn = nearest_neighbors(x)?;
    Ok(nn.iter().map(|(_, rho)| rho).sum::<f64>() / x.len_of(Axis(0)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    /// Pairwise-distance reference, written independently of the module.
    fn brute_loss(x: &Array2<f64>) -> f64 {
        let n = x.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let mut m = f64::INFINITY;
            for j in 0..n {
                if i != j {
                    let d = (0..x.ncols()).map(|k| (x[[i, k]] - x[[j, k]]).powi(2)).sum::<f64>().sqrt();
                    m = m.min(d);
                }
            }
            total += m.ln();
        }
        -total / n as f64
    }

    #[test]
    fn two_points_unit_distance() {
        let x = array![[0.0, 0.0], [1.0, 0.0]];
        assert_eq!(koleo_loss(x.view()).unwrap(), 0.0);
    }

    #[test]
    fn two_points_distance_e() {
        let e = std::f64::consts::E;
        let x = array![[0.0, 0.0], [0.0, e]];
        assert!((koleo_loss(x.view()).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_pairwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = random_batch(16, 32, &mut rng);
            assert!((koleo_loss(x.view()).unwrap() - brute_loss(&x)).abs() < 1e-6);
        }
    }

    #[test]
    fn two_point_gradient_pushes_apart() {
        let x = array![[0.0, 0.0], [3.0, 4.0]];
        let g = koleo_grad(x.view()).unwrap();
        // Each point gets two terms of magnitude (1/2)/‖Δ‖; total 1/‖Δ‖ = 0.2.
        // The descent direction −g moves each point away from the other.
        assert!((g[[0, 0]] - 0.2 * 0.6).abs() < 1e-12);
        assert!((g[[0, 1]] - 0.2 * 0.8).abs() < 1e-12);
        assert!((g[[1, 0]] + 0.2 * 0.6).abs() < 1e-12);
        assert!((g[[1, 1]] + 0.2 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-4;
        for _ in 0..10 {
            let x = random_batch(12, 8, &mut rng);
            let g = koleo_grad(x.view()).unwrap();
            let mut fd = Array2::<f64>::zeros(x.raw_dim());
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                fd[[r, c]] = (brute_loss(&xp) - brute_loss(&xm)) / (2.0 * h);
            }
            let rel = (&g - &fd).mapv(|v| v * v).sum().sqrt()
                / g.mapv(|v| v * v).sum().sqrt().max(1e-12);
            assert!(rel <= 1e-3, "relative error {rel}");
        }
    }

    #[test]
    fn scaling_shifts_loss_by_log_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_batch(10, 5, &mut rng);
        let c: f64 = 2.5;
        let nn = nearest_neighbors(x.view()).unwrap();
        let scaled = &x * c;
        let nn_scaled = nearest_neighbors(scaled.view()).unwrap();
        assert_eq!(
            nn.iter().map(|p| p.0).collect::<Vec<_>>(),
            nn_scaled.iter().map(|p| p.0).collect::<Vec<_>>()
        );
        let diff = koleo_loss(x.view()).unwrap() - koleo_loss(scaled.view()).unwrap();
        assert!((diff - c.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicate_rows_are_degenerate() {
        let x = array![[1.0, 2.0], [0.0, 0.0], [1.0, 2.0]];
        assert!(matches!(koleo_loss(x.view()), Err(Error::DegenerateBatch(_))));
        let single = array![[1.0, 2.0]];
        assert!(koleo_loss(single.view()).is_err());
    }

    #[test]
    fn ties_pick_lowest_index() {
        let x = array![[0.0], [1.0], [-1.0]];
        let nn = nearest_neighbors(x.view()).unwrap();
        assert_eq!(nn[0].0, 1);
    }
}
