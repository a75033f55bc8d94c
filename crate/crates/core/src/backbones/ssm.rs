use serde::{Deserialize, Serialize};

use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::kernels::{causal_conv_direct, CausalConv, SsmParamSlices};

/// Diagonal state-space parameters of one direction of one layer.
///
/// Mode `n` of channel `c` has `Λ = -exp(log_neg_re) + i·im`, timescale
/// `Δ = exp(log_dt[c])`, and stands for a conjugate pair when
/// `pair_factor == 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmLayerParams {
    pub channels: usize,
    pub modes: usize,
    pub log_dt: Vec<f64>,
    pub log_neg_re: Vec<f64>,
    pub im: Vec<f64>,
    pub b_re: Vec<f64>,
    pub b_im: Vec<f64>,
    pub c_re: Vec<f64>,
    pub c_im: Vec<f64>,
    pub pair_factor: f64,
}

impl SsmLayerParams {
    /// Reads `ssm.{layer}.{dir}.*` from trained weights.
    pub fn from_weights(weights: &ModelWeights, layer: usize, dir: &str) -> Result<Self> {
        let get = |name: &str| -> Result<Vec<f64>> {
            Ok(weights.get(&format!("ssm.{layer}.{dir}.{name}"))?.data().to_vec())
        };
        let p = SsmLayerParams {
            channels: weights.config.model_dim,
            modes: weights.config.modes(),
            log_dt: get("log_dt")?,
            log_neg_re: get("log_neg_re")?,
            im: get("im")?,
            b_re: get("b_re")?,
            b_im: get("b_im")?,
            c_re: get("c_re")?,
            c_im: get("c_im")?,
            pair_factor: 2.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let cn = self.channels * self.modes;
        let ok = self.log_dt.len() == self.channels
            && [&self.log_neg_re, &self.im, &self.b_re, &self.b_im, &self.c_re, &self.c_im]
                .iter()
                .all(|v| v.len() == cn);
        if !ok {
            return Err(Error::shape("ssm_kernel", format!("{} channels × {} modes", self.channels, self.modes)));
        }
        Ok(())
    }

    fn slices(&self) -> SsmParamSlices<'_> {
        SsmParamSlices {
            channels: self.channels,
            modes: self.modes,
            log_dt: &self.log_dt,
            log_neg_re: &self.log_neg_re,
            im: &self.im,
            b_re: &self.b_re,
            b_im: &self.b_im,
            c_re: &self.c_re,
            c_im: &self.c_im,
            pair_factor: self.pair_factor,
        }
    }

    /// Real convolution kernel `[channels × len]`, entry `l` being
    /// `f · Re Σ_n C_n Ā_n^l B̄_n` with zero-order hold `B̄ = (Ā - 1)/Λ · B`.
    pub fn kernel(&self, len: usize) -> Result<Vec<f64>> {
        self.validate()?;
        if len == 0 {
            return Err(Error::InvalidParameter("kernel length must be at least 1".into()));
        }
        Ok(self.slices().kernel(len))
    }

    /// Output of the layer's convolution on `u: [channels × T]` via the FFT.
    pub fn convolve_fft(&self, u: &[f64], t: usize) -> Result<Vec<f64>> {
        let k = self.kernel(t)?;
        if u.len() != self.channels * t {
            return Err(Error::shape("ssm_convolve", format!("{} values for {} × {t}", u.len(), self.channels)));
        }
        Ok(CausalConv::new(1, self.channels, t, t).forward(u, &k))
    }

    /// Same output by direct O(T²) convolution with the kernel.
    pub fn convolve_direct(&self, u: &[f64], t: usize) -> Result<Vec<f64>> {
        let k = self.kernel(t)?;
        Ok((0..self.channels)
            .flat_map(|c| causal_conv_direct(&u[c * t..][..t], &k[c * t..][..t]))
            .collect())
    }

    /// Same output by stepping the discretized state recurrence.
    pub fn recurrence(&self, u: &[f64], t: usize) -> Result<Vec<f64>> {
        self.validate()?;
        if u.len() != self.channels * t {
            return Err(Error::shape("ssm_recurrence", format!("{} values for {} × {t}", u.len(), self.channels)));
        }
        let s = self.slices();
        Ok((0..self.channels).flat_map(|c| s.recurrence(c, &u[c * t..][..t])).collect())
    }
}
