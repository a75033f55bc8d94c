use crate::error::{Error, Result};

/// A multi-lead sampled ECG in millivolts, stored lead-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    record_id: String,
    subject_id: String,
    sampling_rate: u32,
    n_leads: usize,
    signal: Vec<f64>,
}

impl EcgRecord {
    pub fn new(
        record_id: impl Into<String>,
        subject_id: impl Into<String>,
        sampling_rate: u32,
        n_leads: usize,
        signal: Vec<f64>,
    ) -> Result<Self> {
        let record_id = record_id.into();
        let fail = |reason: String| Error::Load {
            record_id: record_id.clone(),
            reason,
        };
        if sampling_rate == 0 {
            return Err(fail("sampling rate must be positive".into()));
        }
        if n_leads == 0 || signal.is_empty() {
            return Err(fail("record has no leads or no samples".into()));
        }
        if signal.len() % n_leads != 0 {
            return Err(fail(format!(
                "{} values do not split into {n_leads} leads",
                signal.len()
            )));
        }
        if let Some(pos) = signal.iter().position(|v| !v.is_finite()) {
            return Err(fail(format!(
                "non-finite value at lead {} sample {}",
                pos / (signal.len() / n_leads),
                pos % (signal.len() / n_leads)
            )));
        }
        Ok(EcgRecord {
            record_id,
            subject_id: subject_id.into(),
            sampling_rate,
            n_leads,
            signal,
        })
    }

    pub fn record_id(&self) -> &str {
        &self.record_id
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn sampling_rate(&self) -> u32 {
        self.sampling_rate
    }

    pub fn n_leads(&self) -> usize {
        self.n_leads
    }

    pub fn n_samples(&self) -> usize {
        self.signal.len() / self.n_leads
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / f64::from(self.sampling_rate)
    }

    pub fn signal(&self) -> &[f64] {
        &self.signal
    }

    pub fn lead(&self, i: usize) -> &[f64] {
        let n = self.n_samples();
        &self.signal[i * n..(i + 1) * n]
    }

    /// Samples `[offset, offset + len)` of every lead, keeping identity.
    pub fn window(&self, offset: usize, len: usize) -> Result<EcgRecord> {
        if len == 0 || offset + len > self.n_samples() {
            return Err(Error::InvalidParameter(format!(
                "window [{offset}, {}) outside record `{}` of {} samples",
                offset + len,
                self.record_id,
                self.n_samples()
            )));
        }
        let signal = (0..self.n_leads)
            .flat_map(|l| self.lead(l)[offset..offset + len].iter().copied())
            .collect();
        Ok(EcgRecord {
            record_id: self.record_id.clone(),
            subject_id: self.subject_id.clone(),
            sampling_rate: self.sampling_rate,
            n_leads: self.n_leads,
            signal,
        })
    }

    pub(crate) fn with_signal(&self, sampling_rate: u32, signal: Vec<f64>) -> EcgRecord {
        EcgRecord {
            record_id: self.record_id.clone(),
            subject_id: self.subject_id.clone(),
            sampling_rate,
            n_leads: self.n_leads,
            signal,
        }
    }
}
