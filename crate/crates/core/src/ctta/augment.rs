use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domains::resize_bilinear;
use crate::error::{Error, Result};
use crate::numerics::{rng_from, Tensor};

/// One test-time view of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    /// Resolution factor; the image is resampled to `side * scale` and
    /// back to `side`.
    pub scale: f64,
    #[serde(default)]
    pub flip: bool,
    /// Std of additive pixel noise (0 disables it).
    #[serde(default)]
    pub jitter: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        scale: 1.0,
        flip: false,
        jitter: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Applies the view to `b x side x side` images. Jitter noise is drawn
    /// from `seed`.
    pub fn apply(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        if self.is_identity() {
            return Ok(x.clone());
        }
        let &[b, side, side2] = x.shape() else {
            return Err(Error::shape(format!("augmentation expects b x s x s, got {:?}", x.shape())));
        };
        if side != side2 {
            return Err(Error::shape("augmentation expects square images"));
        }
        let scaled = ((side as f64 * self.scale).round() as usize).max(1);
        let noise = (self.jitter > 0.0).then(|| Normal::new(0.0, self.jitter).expect("positive std"));
        let mut rng = rng_from(&[seed]);
        let mut out = Vec::with_capacity(x.len());
        for img in x.data().chunks(side * side) {
            let mut v = if scaled == side {
                img.to_vec()
            } else {
                resize_bilinear(&resize_bilinear(img, side, scaled), scaled, side)
            };
            if self.flip {
                v = v.chunks(side).flat_map(|row| row.iter().rev().copied()).collect();
            }
            if let Some(n) = &noise {
                v.iter_mut().for_each(|p| *p = (*p + n.sample(&mut rng)).clamp(0.0, 1.0));
            }
            out.extend(v);
        }
        Tensor::new(&[b, side, side], out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugmentationSet {
    pub views: Vec<Augmentation>,
}

impl AugmentationSet {
    pub fn identity() -> Self {
        Self {
            views: vec![Augmentation::IDENTITY],
        }
    }

    /// Scales {0.5, 1, 2} plus a flipped identity.
    pub fn desk() -> Self {
        let s = |scale, flip| Augmentation {
            scale,
            flip,
            jitter: 0.0,
        };
        Self {
            views: vec![s(1.0, false), s(1.0, true), s(0.5, false), s(2.0, false)],
        }
    }

    /// Seven resolution factors from 0.5 to 2.0, each with and without flip.
    pub fn full() -> Self {
        let scales = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];
        let views = scales
            .iter()
            .flat_map(|&scale| [false, true].map(|flip| Augmentation { scale, flip, jitter: 0.0 }))
            .collect();
        Self { views }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::config("augmentation set is empty"));
        }
        if !self.views.iter().any(Augmentation::is_identity) {
            return Err(Error::config("augmentation set must contain the identity view"));
        }
        for v in &self.views {
            if !(v.scale > 0.0 && v.scale.is_finite()) || !(v.jitter >= 0.0 && v.jitter.is_finite()) {
                return Err(Error::config(format!("invalid augmentation {v:?}")));
            }
        }
        Ok(())
    }
}

impl Default for AugmentationSet {
    fn default() -> Self {
        Self::desk()
    }
}
