//! The optimization primitives: inner gradient descent, the truncated
//! Neumann inverse-Hessian-vector product, and the hypergradient that chains
//! them. All three are generic over the loss closures so they can be
//! exercised on closed-form problems directly.

use super::{Result, TrainError};
use crate::tensor::{self, backward, grads, ParamSet, Tensor};

/// `t_p` full gradient-descent steps on `loss_fn`, starting from `theta0`.
/// The returned parameters are the approximate best response used by the
/// meta phase.
pub fn parameter_optimization<F>(loss_fn: F, theta0: &ParamSet, t_p: usize, lr: f64) -> Result<ParamSet>
where
    F: Fn(&ParamSet) -> tensor::Result<Tensor>,
{
    let mut theta = theta0.detach_all();
    for _ in 0..t_p {
        let leaves = theta.to_leaves();
        let loss = loss_fn(&leaves)?;
        if !loss.item()?.is_finite() {
            return Err(TrainError::Numeric("training loss is not finite".into()));
        }
        let grad = backward(&loss, &leaves)?;
        theta = theta.add_scaled(&grad, -lr)?;
    }
    Ok(theta)
}

/// Truncated Neumann series for the inverse-Hessian-vector product:
/// `α · Σ_{j=0..J} (I − α·H)^j v`, computed iteratively with exactly `J + 1`
/// accumulation terms and `J` HVP calls beyond the zeroth.
pub fn neumann_ihvp<H>(mut hvp_fn: H, v: &[f64], alpha: f64, j: usize) -> Result<Vec<f64>>
where
    H: FnMut(&[f64]) -> tensor::Result<Vec<f64>>,
{
    if !(alpha > 0.0) {
        return Err(TrainError::Config("neumann alpha must be > 0".into()));
    }
    let mut term = v.to_vec();
    let mut acc = v.to_vec();
    for _ in 0..j {
        let hv = hvp_fn(&term)?;
        if hv.len() != term.len() {
            return Err(TrainError::Tensor(tensor::TensorError::DimMismatch {
                expected: term.len(),
                got: hv.len(),
            }));
        }
        for (t, h) in term.iter_mut().zip(&hv) {
            *t -= alpha * h;
        }
        if !term.iter().all(|x| x.is_finite()) {
            return Err(TrainError::Numeric("neumann iteration diverged".into()));
        }
        for (a, t) in acc.iter_mut().zip(&term) {
            *a += t;
        }
    }
    Ok(acc.iter().map(|a| alpha * a).collect())
}

/// Gradient of the bucket validation loss with respect to one generator's
/// parameters, through the approximate best response:
///
/// `−(∂²L_t/∂θ∂ω_i)ᵀ · [α Σ_j (I − α ∂²L_t/∂θ²)^j] · ∂L_v/∂θ`, all evaluated
/// at `theta_star`. Only `omega_i` is differentiated; every other generator
/// is a constant inside `train_loss`.
///
/// The training loss is recorded once with both θ and ω_i as roots, and its
/// connected θ-gradient serves every Neumann probe (an HVP per probe) and
/// the final mixed product — each is a single extra backward pass.
pub fn hypergradient<Lt, Lv>(
    train_loss: &Lt,
    val_loss: &Lv,
    theta_star: &ParamSet,
    omega_i: &ParamSet,
    alpha: f64,
    neumann_j: usize,
) -> Result<ParamSet>
where
    Lt: Fn(&ParamSet, &ParamSet) -> tensor::Result<Tensor>,
    Lv: Fn(&ParamSet) -> tensor::Result<Tensor>,
{
    let theta_leaves = theta_star.to_leaves();
    let vloss = val_loss(&theta_leaves)?;
    let v = backward(&vloss, &theta_leaves)?.flatten();

    let t_leaves = theta_star.to_leaves();
    let o_leaves = omega_i.to_leaves();
    let tloss = train_loss(&t_leaves, &o_leaves)?;
    if !tloss.is_connected() {
        return Ok(omega_i.unflatten(&vec![0.0; omega_i.param_count()])?);
    }
    let t_vec: Vec<Tensor> = t_leaves.tensors().cloned().collect();
    let o_vec: Vec<Tensor> = o_leaves.tensors().cloned().collect();
    let grad_theta = grads(&tloss, &t_vec, true)?;

    // contracts a constant vector against the connected θ-gradient and runs
    // one more backward toward `targets`
    let second_backward = |targets: &[Tensor], u: &[f64]| -> tensor::Result<Vec<f64>> {
        let total: usize = targets.iter().map(Tensor::numel).sum();
        let mut s = Tensor::scalar(0.0)?;
        let mut offset = 0;
        for g in &grad_theta {
            let n = g.numel();
            let uc = Tensor::new(g.rows(), g.cols(), u[offset..offset + n].to_vec())?;
            s = s.add(&tensor::dot(g, &uc)?)?;
            offset += n;
        }
        if !s.is_connected() {
            return Ok(vec![0.0; total]);
        }
        let out = grads(&s, targets, false)?;
        Ok(out.iter().flat_map(|t| t.data().to_vec()).collect())
    };

    let q = neumann_ihvp(|u| second_backward(&t_vec, u), &v, alpha, neumann_j)?;
    let mixed = second_backward(&o_vec, &q)?;
    let negated: Vec<f64> = mixed.iter().map(|x| -x).collect();
    Ok(omega_i.unflatten(&negated)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::scalar(v).unwrap());
        p
    }

    #[test]
    fn one_and_two_gd_steps_on_a_square() {
        // L = θ², θ0 = 1, β = 0.1: one step -> 0.8, two steps -> 0.64
        let theta0 = scalar_params("t", 1.0);
        let loss = |p: &ParamSet| {
            let t = p.get("t").unwrap();
            t.mul(t)
        };
        let one = parameter_optimization(loss, &theta0, 1, 0.1).unwrap();
        assert!((one.get("t").unwrap().item().unwrap() - 0.8).abs() < 1e-12);
        let two = parameter_optimization(loss, &theta0, 2, 0.1).unwrap();
        assert!((two.get("t").unwrap().item().unwrap() - 0.64).abs() < 1e-12);
    }

    #[test]
    fn neumann_identity_hessian_geometric_sum() {
        // H = I, α = 0.5, J = 3: 0.5·(1 + 0.5 + 0.25 + 0.125) = 0.9375
        let v = [2.0, -4.0];
        let out = neumann_ihvp(|u| Ok(u.to_vec()), &v, 0.5, 3).unwrap();
        assert_eq!(out, vec![0.9375 * 2.0, 0.9375 * -4.0]);
    }

    #[test]
    fn neumann_identity_error_is_exactly_geometric() {
        // error after J steps against the exact inverse is (1-α)^{J+1}·‖v‖
        let v = [1.0, -2.0, 0.5];
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (alpha, j) in [(0.5, 3), (0.25, 6), (0.9, 2)] {
            let out = neumann_ihvp(|u| Ok(u.to_vec()), &v, alpha, j).unwrap();
            let err: f64 = out
                .iter()
                .zip(&v)
                .map(|(o, x)| (o - x) * (o - x))
                .sum::<f64>()
                .sqrt();
            let want = (1.0 - alpha).powi(j as i32 + 1) * norm;
            assert!((err - want).abs() < 1e-12, "alpha {alpha} j {j}: {err} vs {want}");
        }
    }

    #[test]
    fn neumann_diagonal_two_by_two() {
        // H = diag(2, 4), v = (1, 1), α = 0.25, J = 10
        let out = neumann_ihvp(
            |u| Ok(vec![2.0 * u[0], 4.0 * u[1]]),
            &[1.0, 1.0],
            0.25,
            10,
        )
        .unwrap();
        // per-coordinate geometric series: α Σ (1-αλ)^j
        let geo = |lam: f64| 0.25 * (0..=10).map(|j| (1.0 - 0.25 * lam).powi(j)).sum::<f64>();
        assert!((out[0] - geo(2.0)).abs() < 1e-12);
        assert!((out[1] - geo(4.0)).abs() < 1e-12);
        assert!((out[0] - 0.499756).abs() < 1e-5);
        assert!((out[1] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn neumann_converges_to_dense_solve_on_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 4;
        // SPD via MᵀM + I
        let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in 0..n {
                    s += m[k * n + i] * m[k * n + j];
                }
                h[i * n + j] = s;
            }
        }
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // α below 1/λ_max (row-sum bound)
        let lmax_bound: f64 = (0..n)
            .map(|i| (0..n).map(|j| h[i * n + j].abs()).sum())
            .fold(0.0f64, f64::max);
        let alpha = 0.9 / lmax_bound;
        let out = neumann_ihvp(
            |u| {
                Ok((0..n)
                    .map(|i| (0..n).map(|j| h[i * n + j] * u[j]).sum())
                    .collect())
            },
            &v,
            alpha,
            200,
        )
        .unwrap();
        let solved = solve(&h, &v, n);
        for i in 0..n {
            assert!((out[i] - solved[i]).abs() < 1e-3, "{} vs {}", out[i], solved[i]);
        }
    }

    fn solve(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        // Gaussian elimination with partial pivoting; test oracle only.
        let mut m: Vec<f64> = a.to_vec();
        let mut x: Vec<f64> = b.to_vec();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| {
                m[i * n + col].abs().partial_cmp(&m[j * n + col].abs()).unwrap()
            })
            .unwrap();
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
            x.swap(col, piv);
            for row in col + 1..n {
                let f = m[row * n + col] / m[col * n + col];
                for k in col..n {
                    m[row * n + k] -= f * m[col * n + k];
                }
                x[row] -= f * x[col];
            }
        }
        for col in (0..n).rev() {
            x[col] /= m[col * n + col];
            for row in 0..col {
                x[row] -= m[row * n + col] * x[col];
            }
        }
        x
    }

    #[test]
    fn hypergradient_on_analytic_bilevel_toy() {
        // L_t = (θ - ω)², L_v = θ²: best response θ*(ω) = ω, dL_v/dω = 2ω.
        let omega = scalar_params("w", 3.0);
        let train = |th: &ParamSet, om: &ParamSet| {
            let d = th.get("t").unwrap().sub(om.get("w").unwrap())?;
            d.mul(&d)
        };
        let val = |th: &ParamSet| {
            let t = th.get("t").unwrap();
            t.mul(t)
        };
        // inner optimization to convergence
        let omega_const = omega.detach_all();
        let theta_star = parameter_optimization(
            |th| train(th, &omega_const),
            &scalar_params("t", 0.0),
            200,
            0.25,
        )
        .unwrap();
        // H = 2, α = 0.25: series converges to 1/2 = H⁻¹
        let g = hypergradient(&train, &val, &theta_star, &omega, 0.25, 2000).unwrap();
        let got = g.get("w").unwrap().item().unwrap();
        assert!((got - 6.0).abs() < 1e-3, "{got}");
    }

    #[test]
    fn hypergradient_without_coupling_is_zero() {
        let omega = scalar_params("w", 2.0);
        let train = |th: &ParamSet, _: &ParamSet| {
            let t = th.get("t").unwrap();
            t.mul(t)
        };
        let val = |th: &ParamSet| {
            let t = th.get("t").unwrap();
            t.mul(t)
        };
        let theta_star = scalar_params("t", 0.5);
        let g = hypergradient(&train, &val, &theta_star, &omega, 0.1, 5).unwrap();
        assert_eq!(g.get("w").unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn fused_hypergradient_equals_composed_second_order_ops() {
        // the shared-forward implementation must agree with composing the
        // reference hvp / mixed_vjp ops step by step
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 3;
        let a: Vec<f64> = {
            let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-0.7..0.7)).collect();
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut s = if i == j { 2.0 } else { 0.0 };
                    for k in 0..n {
                        s += m[k * n + i] * m[k * n + j];
                    }
                    a[i * n + j] = s;
                }
            }
            a
        };
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a_t = Tensor::new(n, n, a).unwrap();
        let b_t = Tensor::new(n, n, b).unwrap();
        let train = move |th: &ParamSet, om: &ParamSet| {
            let t = th.get("t").unwrap();
            let w = om.get("w").unwrap();
            dot(t, &a_t.matmul(t)?)?.scale(0.5)?.add(&dot(t, &b_t.matmul(w)?)?)
        };
        let val = |th: &ParamSet| {
            let t = th.get("t").unwrap();
            dot(t, t)?.scale(0.5)
        };
        let theta = scalar_column("t", &[0.4, -0.2, 0.9]);
        let omega = scalar_column("w", &[1.0, -0.5, 0.25]);
        let (alpha, j) = (0.2, 12);

        let fused = hypergradient(&train, &val, &theta, &omega, alpha, j).unwrap();

        // reference route through the public second-order ops
        let theta_leaves = theta.to_leaves();
        let v = backward(&val(&theta_leaves).unwrap(), &theta_leaves).unwrap().flatten();
        let omega_const = omega.detach_all();
        let q = neumann_ihvp(
            |u| crate::tensor::hvp(|th| train(th, &omega_const), &theta, u),
            &v,
            alpha,
            j,
        )
        .unwrap();
        let mixed = crate::tensor::mixed_vjp(|th, om| train(th, om), &theta, &omega, &q).unwrap();
        let reference: Vec<f64> = mixed.iter().map(|x| -x).collect();

        for (f, r) in fused.flatten().iter().zip(&reference) {
            assert!((f - r).abs() < 1e-12, "{f} vs {r}");
        }
    }

    #[test]
    fn hypergradient_matches_black_box_finite_differences() {
        // random 2-parameter quadratic bilevel instances:
        // L_t = ½θᵀAθ + θᵀBω + ½‖ω‖², L_v = ½‖θ − target‖²
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for case in 0..5 {
            let n = 2;
            let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut s = if i == j { 1.5 } else { 0.0 };
                    for k in 0..n {
                        s += m[k * n + i] * m[k * n + j];
                    }
                    a[i * n + j] = s;
                }
            }
            let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let omega0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let a_t = Tensor::new(n, n, a.clone()).unwrap();
            let b_t = Tensor::new(n, n, b.clone()).unwrap();
            let target_t = Tensor::column(&target).unwrap();

            let train = move |th: &ParamSet, om: &ParamSet| {
                let t = th.get("t").unwrap();
                let w = om.get("w").unwrap();
                let quad = dot(t, &a_t.matmul(t)?)?.scale(0.5)?;
                let coupling = dot(t, &b_t.matmul(w)?)?;
                let ridge = dot(w, w)?.scale(0.5)?;
                quad.add(&coupling)?.add(&ridge)
            };
            let val = move |th: &ParamSet| {
                let d = th.get("t").unwrap().sub(&target_t)?;
                dot(&d, &d)?.scale(0.5)
            };

            let inner = |omega: &ParamSet| {
                let oc = omega.detach_all();
                parameter_optimization(
                    |th| train(th, &oc),
                    &scalar_column("t", &vec![0.0; n]),
                    400,
                    0.2,
                )
                .unwrap()
            };

            let mut omega = ParamSet::new();
            omega.insert("w", Tensor::column(&omega0).unwrap());
            let theta_star = inner(&omega);
            let hyper =
                hypergradient(&train, &val, &theta_star, &omega, 0.2, 400).unwrap();

            // black-box finite differences of inner-optimize-then-validate
            let h = 1e-4;
            let flat = omega.flatten();
            for i in 0..n {
                let mut up = flat.clone();
                up[i] += h;
                let mut dn = flat.clone();
                dn[i] -= h;
                let up_set = omega.unflatten(&up).unwrap();
                let dn_set = omega.unflatten(&dn).unwrap();
                let f = |o: &ParamSet| {
                    let th = inner(o);
                    val(&th.to_leaves()).unwrap().item().unwrap()
                };
                let fd = (f(&up_set) - f(&dn_set)) / (2.0 * h);
                let got = hyper.flatten()[i];
                let denom = fd.abs().max(1e-6);
                assert!(
                    ((got - fd) / denom).abs() < 0.10,
                    "case {case} coord {i}: ift {got} vs fd {fd}"
                );
            }
        }
    }

    fn scalar_column(name: &str, v: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::column(v).unwrap());
        p
    }
}
