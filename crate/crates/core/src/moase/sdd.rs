//! Spatial differentiate dropout: hard rank-based retention of the top-K or
//! bottom-K activations in each selection group.
//!
//! Ties at the cutoff value are broken toward the smaller flat index, so
//! exactly K entries survive in every group. The mask is a constant as far
//! as differentiation is concerned.

use super::config::SddAxis;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Absorbs representation error in `total * fraction` before flooring, so
/// that e.g. `100 * 0.29` counts as 29.
const FLOOR_TOLERANCE: f64 = 1e-9;

/// `floor(total * fraction)` with [`FLOOR_TOLERANCE`].
pub fn count_for_fraction(total: usize, fraction: f64) -> usize {
    (total as f64 * fraction + FLOOR_TOLERANCE).floor() as usize
}

/// Dynamic retention count `floor(total * clamp(q + eta * t, 1/total, 1))`.
pub fn dynamic_k(total: usize, q: f64, eta: f64, t: f64) -> usize {
    let lo = 1.0 / total as f64;
    let frac = (q + eta * t).clamp(lo, 1.0);
    count_for_fraction(total, frac).clamp(1, total)
}

/// Indices retained from one group, in ascending index order.
pub fn select_group(values: &[f64], k: usize, largest: bool) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::Selection(format!(
            "K = {k} outside [1, {}]",
            values.len()
        )));
    }
    // adding +0.0 folds -0.0 into +0.0 so signed zeros tie
    let key = |i: usize| values[i] + 0.0;
    let mut order: Vec<usize> = (0..values.len()).collect();
    if largest {
        order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    } else {
        order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    }
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// 0/1 mask over a flat buffer split into consecutive groups of
/// `group_size`, keeping `ks[group]` entries in each.
pub fn selection_mask(values: &[f64], group_size: usize, ks: &[usize], largest: bool) -> Result<Vec<f64>> {
    if group_size == 0 || values.len() % group_size != 0 || values.len() / group_size != ks.len() {
        return Err(Error::shape(format!(
            "{} values cannot be split into {} groups of {group_size}",
            values.len(),
            ks.len()
        )));
    }
    let mut mask = vec![0.0; values.len()];
    for (gi, (chunk, &k)) in values.chunks(group_size).zip(ks).enumerate() {
        for i in select_group(chunk, k, largest)? {
            mask[gi * group_size + i] = 1.0;
        }
    }
    Ok(mask)
}

/// Selection group size and group count for a `b x n x m` tensor.
pub fn groups_for(shape: &[usize], axis: SddAxis) -> Result<(usize, usize)> {
    let &[b, n, m] = shape else {
        return Err(Error::shape(format!("sdd expects a rank-3 tensor, got {shape:?}")));
    };
    Ok(match axis {
        SddAxis::Token => (n * m, b),
        SddAxis::Channel => (m, b * n),
    })
}

/// Retains, per sample, the `k` largest (`largest = true`) or smallest
/// entries of the `n x m` slice and zeroes the rest.
pub fn sdd(f: &Tensor, k: usize, largest: bool) -> Result<(Tensor, Vec<bool>)> {
    let (group, count) = groups_for(f.shape(), SddAxis::Token)?;
    let mask = selection_mask(f.data(), group, &vec![k; count], largest)?;
    let data = f.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    let out = Tensor::new(f.shape(), data)?;
    Ok((out, mask.into_iter().map(|m| m > 0.0).collect()))
}

/// Graph version: multiplies `x` by the selection mask, held constant.
/// `ks` holds one count per selection group. Returns the masked node and
/// the mask itself.
pub fn sdd_on_graph(g: &mut Graph, x: Var, ks: &[usize], largest: bool, axis: SddAxis) -> Result<(Var, Tensor)> {
    let shape = g.shape(x).to_vec();
    let (group, _) = groups_for(&shape, axis)?;
    let mask = selection_mask(g.value(x).data(), group, ks, largest)?;
    let mask = Tensor::new(&shape, mask)?;
    let mv = g.constant(mask.clone());
    Ok((g.mul(x, mv)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn keeps_top_two() {
        // brute force: sorted desc = [4, 3, 2, 1] -> keep 4 and 3
        let (out, mask) = sdd(&flat(&[1, 2, 2], &[1., 4., 2., 3.]), 2, true).unwrap();
        assert_eq!(out.data(), &[0., 4., 0., 3.]);
        assert_eq!(mask, vec![false, true, false, true]);
    }

    #[test]
    fn keeping_everything_is_identity() {
        let f = flat(&[2, 2, 2], &[1., -4., 2., 3., 0.5, 0.5, -1., 9.]);
        for largest in [true, false] {
            let (out, _) = sdd(&f, 4, largest).unwrap();
            assert_eq!(out, f);
        }
    }

    #[test]
    fn ties_prefer_smaller_index() {
        let (out, _) = sdd(&flat(&[1, 2, 2], &[2., 2., 2., 2.]), 2, true).unwrap();
        assert_eq!(out.data(), &[2., 2., 0., 0.]);
        let (out, _) = sdd(&flat(&[1, 2, 2], &[2., 2., 2., 2.]), 3, false).unwrap();
        assert_eq!(out.data(), &[2., 2., 2., 0.]);
    }

    #[test]
    fn signed_zeros_tie() {
        let (_, mask) = sdd(&flat(&[1, 1, 3], &[0.0, -0.0, 1.0]), 2, true).unwrap();
        assert_eq!(mask, vec![true, false, true]);
        let (_, mask) = sdd(&flat(&[1, 1, 3], &[0.0, -0.0, 1.0]), 1, false).unwrap();
        assert_eq!(mask, vec![true, false, false]);
    }

    #[test]
    fn bottom_selection() {
        let (out, _) = sdd(&flat(&[1, 1, 4], &[1., 4., 2., 3.]), 2, false).unwrap();
        assert_eq!(out.data(), &[1., 0., 2., 0.]);
    }

    #[test]
    fn out_of_range_k() {
        let f = flat(&[1, 2, 2], &[1., 2., 3., 4.]);
        assert!(matches!(sdd(&f, 0, true), Err(Error::Selection(_))));
        assert!(matches!(sdd(&f, 5, false), Err(Error::Selection(_))));
    }

    #[test]
    fn dynamic_k_formula() {
        // q + eta*T = 0.5 + 0.1 * 1 = 0.6
        assert_eq!(dynamic_k(100, 0.5, 0.1, 40f64.tanh()), 60);
        assert_eq!(dynamic_k(136, 0.25, 0.1, 0.0), 34);
        assert_eq!(dynamic_k(100, 0.29, 0.0, 0.0), 29);
        // clamped at both ends
        assert_eq!(dynamic_k(10, 0.01, 0.1, -1.0), 1);
        assert_eq!(dynamic_k(10, 0.95, 0.1, 1.0), 10);
    }

    #[test]
    fn channel_groups_are_per_token() {
        let shape = [2, 3, 4];
        assert_eq!(groups_for(&shape, SddAxis::Token).unwrap(), (12, 2));
        assert_eq!(groups_for(&shape, SddAxis::Channel).unwrap(), (4, 6));
    }
}
