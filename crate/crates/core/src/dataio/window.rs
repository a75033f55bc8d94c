use rand::Rng;

use super::record::EcgRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Window length in samples, checked against the record.
pub fn window_samples(record: &EcgRecord, duration_s: f64) -> Result<usize> {
    let len = (duration_s * f64::from(record.sampling_rate())).round();
    if !(len >= 1.0) {
        return Err(Error::InvalidParameter(format!("window of {duration_s} s is empty")));
    }
    let len = len as usize;
    if len > record.n_samples() {
        return Err(Error::InvalidParameter(format!(
            "record `{}` has {} samples, shorter than a {len}-sample window",
            record.record_id(),
            record.n_samples()
        )));
    }
    Ok(len)
}

/// Contiguous window at an offset drawn uniformly from all valid offsets.
pub fn random_crop<R: Rng + ?Sized>(record: &EcgRecord, duration_s: f64, rng: &mut R) -> Result<EcgRecord> {
    let len = window_samples(record, duration_s)?;
    let offset = rng.random_range(0..=record.n_samples() - len);
    record.window(offset, len)
}

/// Non-overlapping windows from sample 0; a shorter remainder is dropped.
pub fn sliding_windows(record: &EcgRecord, duration_s: f64) -> Result<Vec<EcgRecord>> {
    let len = window_samples(record, duration_s)?;
    (0..record.n_samples() / len)
        .map(|i| record.window(i * len, len))
        .collect()
}

/// Stacks equally shaped records into a `[batch, leads, samples]` tensor.
pub fn stack_records(records: &[EcgRecord]) -> Result<Tensor> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidParameter("cannot stack an empty batch".into()))?;
    let (leads, n) = (first.n_leads(), first.n_samples());
    let mut data = Vec::with_capacity(records.len() * leads * n);
    for r in records {
        if r.n_leads() != leads || r.n_samples() != n {
            return Err(Error::shape(
                "stack_records",
                format!("record `{}` is {}x{}, expected {leads}x{n}", r.record_id(), r.n_leads(), r.n_samples()),
            ));
        }
        data.extend_from_slice(r.signal());
    }
    Tensor::new(&[records.len(), leads, n], data)
}
