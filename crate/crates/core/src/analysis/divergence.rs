use crate::error::{Error, Result};

/// Smoothing added to every entry of `Q` (then renormalised) before the log.
pub const KL_EPS: f64 = 1e-12;

fn check_distribution(p: &[f64], which: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::validation(format!("{which} is empty")));
    }
    if p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::validation(format!("{which} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!("{which} sums to {s}, not 1")));
    }
    Ok(())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::validation(format!("length mismatch: {} vs {}", p.len(), q.len())));
    }
    check_distribution(p, "P")?;
    check_distribution(q, "Q")
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    if p == q {
        return 0.0;
    }
    let norm = (1.0 + KL_EPS * q.len() as f64).ln();
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - (qi + KL_EPS).ln() + norm))
        .sum()
}

/// `sum P log(P / Q)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kl_unchecked(p, q).max(0.0))
}

/// Jensen-Shannon divergence against the midpoint `M = (P + Q) / 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    if p == q {
        return Ok(0.0);
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_unchecked(p, &m) + 0.5 * kl_unchecked(q, &m);
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Softmax over the dimensions of the mean feature vector.
pub fn domain_distribution(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = features.first() else {
        return Err(Error::validation("domain has no features"));
    };
    let d = first.len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::validation("features must share a nonzero dimension"));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
    }
    let inv = 1.0 / features.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let top = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for m in mean.iter_mut() {
        *m = (*m - top).exp();
        z += *m;
    }
    mean.iter_mut().for_each(|m| *m /= z);
    Ok(mean)
}

/// JS divergence between consecutive domains, in the given order.
pub fn inter_domain_js(domains: &[&[Vec<f64>]]) -> Result<Vec<f64>> {
    if domains.len() < 2 {
        return Err(Error::validation("need at least two domains"));
    }
    let dists = domains.iter().map(|f| domain_distribution(f)).collect::<Result<Vec<_>>>()?;
    dists.windows(2).map(|w| js_divergence(&w[0], &w[1])).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntraClass {
    /// One value per class, indexed by label.
    pub per_class: Vec<f64>,
    /// Unweighted mean over classes.
    pub mean: f64,
}

/// Mean squared distance to the class centroid, per class.
pub fn intra_class_divergence(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<IntraClass> {
    if features.len() != labels.len() {
        return Err(Error::validation(format!("{} features but {} labels", features.len(), labels.len())));
    }
    let d = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::validation("features must share a dimension"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::validation(format!("label {l} out of range for {classes} classes")));
    }
    let missing: Vec<usize> = (0..classes).filter(|c| !labels.contains(c)).collect();
    if !missing.is_empty() {
        return Err(Error::validation(format!("classes {missing:?} have no samples")));
    }
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let members: Vec<&Vec<f64>> = features.iter().zip(labels).filter(|(_, &l)| l == c).map(|(f, _)| f).collect();
        let inv = 1.0 / members.len() as f64;
        let mut centre = vec![0.0; d];
        for f in &members {
            centre.iter_mut().zip(f.iter()).for_each(|(m, v)| *m += v);
        }
        centre.iter_mut().for_each(|m| *m *= inv);
        let spread: f64 = members
            .iter()
            .map(|f| f.iter().zip(&centre).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        per_class.push(spread * inv);
    }
    let mean = per_class.iter().sum::<f64>() / classes as f64;
    Ok(IntraClass { per_class, mean })
}
