use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{row_loss, row_loss_and_grad, DropoutMasks, DropoutSpec, ModelParams, Tensors};
use crate::rng::stream;
use crate::task::SampleBatch;

/// Rows per gradient accumulator. Fixed so the floating-point summation
/// order does not depend on the execution mode.
const GRAD_CHUNK: usize = 16;

/// Where per-row dropout masks come from: one stream per (seed, step, row).
#[derive(Clone, Copy, Debug)]
pub struct MaskSource {
    pub spec: DropoutSpec,
    pub seed: u64,
    pub step: u64,
}

impl MaskSource {
    pub const OFF: MaskSource = MaskSource { spec: DropoutSpec::OFF, seed: 0, step: 0 };

    pub fn masks(&self, row: usize, len: usize, d: usize) -> DropoutMasks {
        if !self.spec.is_active() {
            return DropoutMasks::default();
        }
        let mut rng = stream(self.seed, "dropout", &[self.step, row as u64]);
        DropoutMasks::sample(&self.spec, len, d, &mut rng)
    }
}

fn check(params: &ModelParams, batch: &SampleBatch) -> Result<()> {
    if batch.seq_len() < 2 {
        return Err(Error::Precondition("training batches need rows of length at least 2".into()));
    }
    if batch.vocab().size() != params.dims.v {
        return Err(Error::Shape(format!("batch vocabulary {} vs model {}", batch.vocab().size(), params.dims.v)));
    }
    Ok(())
}

/// Mean next-token NLL over every row and prefix `1..len-1`.
pub fn batch_loss(params: &ModelParams, batch: &SampleBatch, masks: &MaskSource) -> Result<f64> {
    check(params, batch)?;
    let inputs = batch.seq_len() - 1;
    let mut total = 0.0;
    for (i, row) in batch.rows().enumerate() {
        total += row_loss(params, row, masks.masks(i, inputs, params.dims.d))?;
    }
    Ok(total / (batch.n() * inputs) as f64)
}

/// [`batch_loss`] together with its gradient.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &SampleBatch,
    masks: &MaskSource,
    exec: Exec,
) -> Result<(f64, Tensors)> {
    check(params, batch)?;
    let inputs = batch.seq_len() - 1;
    let weight = 1.0 / (batch.n() * inputs) as f64;
    let chunks = batch.n().div_ceil(GRAD_CHUNK);
    let partial = exec.map_range(chunks, |c| -> Result<(f64, Tensors)> {
        let mut grads = Tensors::zeros(&params.dims);
        let mut loss = 0.0;
        for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(batch.n()) {
            let m = masks.masks(i, inputs, params.dims.d);
            loss += row_loss_and_grad(params, batch.row(i), m, weight, &mut grads)?;
        }
        Ok((loss, grads))
    });
    let mut total = 0.0;
    let mut grads = Tensors::zeros(&params.dims);
    for p in partial {
        let (l, g) = p?;
        total += l;
        grads.zip_apply(&g, |a, b| *a += b);
    }
    Ok((total * weight, grads))
}
