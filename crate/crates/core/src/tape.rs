//! Reverse-mode differentiation over recorded primitive applications.
//!
//! A [`Tape`] stores every value produced during a forward pass together
//! with the primitive that produced it. [`Tape::backward`] seeds one scalar
//! output component and walks the records in reverse, visiting each once.

use crate::error::{Error, Result};
use crate::ops::Primitive;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Record<'a> {
    value: Tensor,
    source: Option<(Primitive<'a>, TensorId)>,
}

#[derive(Default)]
pub struct Tape<'a> {
    records: Vec<Record<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.records.push(Record {
            value,
            source: None,
        });
        TensorId(self.records.len() - 1)
    }

    /// Evaluates `op` on a recorded value and records the result.
    pub fn apply(&mut self, op: Primitive<'a>, input: TensorId) -> Result<TensorId> {
        let position = self.records.len();
        let x = self.value(input)?;
        let y = op.forward(x).map_err(|e| match e {
            Error::ShapeMismatch {
                expected, found, ..
            } => Error::ShapeMismatch {
                context: format!("op #{position} ({})", op.name()),
                expected,
                found,
            },
            other => other,
        })?;
        y.ensure_finite(format!("output of op #{position} ({})", op.name()))?;
        self.records.push(Record {
            value: y,
            source: Some((op, input)),
        });
        Ok(TensorId(position))
    }

    pub fn value(&self, id: TensorId) -> Result<&Tensor> {
        self.records
            .get(id.0)
            .map(|r| &r.value)
            .ok_or(Error::UnknownTensor(id.0))
    }

    /// Number of recorded primitive applications (leaves excluded).
    pub fn op_count(&self) -> usize {
        self.records.iter().filter(|r| r.source.is_some()).count()
    }

    /// `d output[output_index] / d wrt`, shaped like `wrt`.
    pub fn backward(&self, output: TensorId, output_index: usize, wrt: TensorId) -> Result<Tensor> {
        let out = self.value(output)?;
        if output_index >= out.len() {
            return Err(Error::IndexOutOfRange {
                what: "output",
                index: output_index,
                len: out.len(),
            });
        }
        let mut seed = Tensor::zeros(out.shape());
        seed.data_mut()[output_index] = 1.0;
        self.backward_seeded(output, &seed, wrt)
    }

    /// Vector-Jacobian product `seedᵀ · d output / d wrt`.
    pub fn backward_seeded(&self, output: TensorId, seed: &Tensor, wrt: TensorId) -> Result<Tensor> {
        let out = self.value(output)?;
        let target = self.value(wrt)?;
        if seed.shape() != out.shape() {
            return Err(Error::shape("backward seed", out.shape(), seed.shape()));
        }
        if wrt.0 > output.0 {
            return Ok(Tensor::zeros(target.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for pos in (wrt.0 + 1..=output.0).rev() {
            let Some(dy) = grads[pos].take() else {
                continue;
            };
            let record = &self.records[pos];
            let Some((op, input)) = record.source else {
                continue;
            };
            let x = &self.records[input.0].value;
            let dx = op.backward(x, &record.value, &dy);
            match &mut grads[input.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(dx.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(dx),
            }
        }
        Ok(grads[wrt.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(target.shape())))
    }

    /// Smallest distance of any recorded primitive input to a kink of that
    /// primitive. Finite-difference checks are only meaningful when this is
    /// comfortably larger than the probe step.
    pub fn kink_margin(&self) -> f64 {
        self.records
            .iter()
            .filter_map(|r| r.source)
            .map(|(op, input)| {
                let producer = &self.records[input.0];
                let after_relu = matches!(producer.source, Some((Primitive::Relu, _)));
                op.kink_margin_after(&producer.value, after_relu)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Result of [`forward_eval`]: the tape plus handles to its input and output.
pub struct Evaluation<'a> {
    pub tape: Tape<'a>,
    pub input: TensorId,
    pub output: TensorId,
}

impl<'a> Evaluation<'a> {
    pub fn output_value(&self) -> &Tensor {
        self.tape.value(self.output).expect("output recorded")
    }

    pub fn gradient(&self, output_index: usize) -> Result<Tensor> {
        self.tape.backward(self.output, output_index, self.input)
    }
}

/// Runs a primitive sequence on `input`, recording everything needed for
/// the backward pass.
pub fn forward_eval<'a>(ops: &[Primitive<'a>], input: &Tensor) -> Result<Evaluation<'a>> {
    let mut tape = Tape::new();
    let input_id = tape.leaf(input.clone());
    let mut current = input_id;
    for op in ops {
        current = tape.apply(*op, current)?;
    }
    Ok(Evaluation {
        tape,
        input: input_id,
        output: current,
    })
}
