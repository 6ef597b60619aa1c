//! Flat parameter vectors with a shape manifest.

use serde::{Deserialize, Serialize};

use crate::adcore::{Tape, Tensor, Var};
use crate::error::{DecodeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Encoder,
    DecoderHead,
    Flow,
    HyperTrunk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Fan-in of the layer this tensor belongs to.
    pub fan_in: usize,
    /// Extra factor on the generated values.
    #[serde(default = "unit")]
    pub gain: f64,
}

fn unit() -> f64 {
    1.0
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub target: TargetKind,
    pub entries: Vec<TensorSpec>,
}

impl Manifest {
    pub fn new(target: TargetKind) -> Self {
        Manifest {
            target,
            entries: Vec::new(),
        }
    }

    /// Appends a dense layer `name_w: [fan_in, fan_out]`, `name_b: [1, fan_out]`.
    pub fn dense(self, name: &str, fan_in: usize, fan_out: usize) -> Self {
        self.dense_scaled(name, fan_in, fan_out, 1.0)
    }

    /// Like [`Manifest::dense`] with `gain` on both tensors.
    pub fn dense_scaled(mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        self.entries.push(TensorSpec {
            name: format!("{name}_w"),
            rows: fan_in,
            cols: fan_out,
            fan_in,
            gain,
        });
        self.entries.push(TensorSpec {
            name: format!("{name}_b"),
            rows: 1,
            cols: fan_out,
            fan_in,
            gain,
        });
        self
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(TensorSpec::len).sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.entries
            .iter()
            .map(|e| {
                let o = acc;
                acc += e.len();
                o
            })
            .collect()
    }

    pub fn describe(&self) -> String {
        let shapes: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!("{}[{}x{}]", e.name, e.rows, e.cols))
            .collect();
        format!("{:?}: {}", self.target, shapes.join(", "))
    }

    pub fn check_matches(&self, other: &Manifest) -> Result<()> {
        if self != other {
            return Err(DecodeError::Manifest {
                expected: self.describe(),
                actual: other.describe(),
            });
        }
        Ok(())
    }

    /// Slices a flat tape vector into the manifest's tensors, in order.
    pub fn unpack(&self, tape: &Tape, flat: Var) -> Result<Vec<Var>> {
        let (r, c) = tape.shape(flat);
        if r * c != self.total() {
            return Err(DecodeError::Manifest {
                expected: format!("{} parameters ({})", self.total(), self.describe()),
                actual: format!("{} parameters", r * c),
            });
        }
        let mut out = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for e in &self.entries {
            out.push(tape.slice_flat(flat, offset, e.rows, e.cols)?);
            offset += e.len();
        }
        Ok(out)
    }

    /// Per-element scale `gain * sqrt(1 / fan_in)` of the layer each
    /// parameter populates.
    pub fn fan_in_gains(&self) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.total());
        for e in &self.entries {
            let s = e.gain * (1.0 / e.fan_in.max(1) as f64).sqrt();
            g.extend(std::iter::repeat_n(s, e.len()));
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBundle {
    pub manifest: Manifest,
    pub flat: Vec<f64>,
}

impl ParamBundle {
    pub fn new(manifest: Manifest, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != manifest.total() {
            return Err(DecodeError::Manifest {
                expected: format!("{} parameters ({})", manifest.total(), manifest.describe()),
                actual: format!("{} parameters", flat.len()),
            });
        }
        Ok(ParamBundle { manifest, flat })
    }

    pub fn zeros(manifest: Manifest) -> Self {
        let n = manifest.total();
        ParamBundle {
            manifest,
            flat: vec![0.0; n],
        }
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::row(self.flat.clone())
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let offsets = self.manifest.offsets();
        self.manifest
            .entries
            .iter()
            .zip(offsets)
            .find(|(e, _)| e.name == name)
            .map(|(e, o)| &self.flat[o..o + e.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let offsets = self.manifest.offsets();
        let hit = self
            .manifest
            .entries
            .iter()
            .zip(offsets)
            .find(|(e, _)| e.name == name)
            .map(|(e, o)| (o, e.len()));
        hit.map(move |(o, n)| &mut self.flat[o..o + n])
    }
}

/// Dense layer on the tape: `x w + b`.
pub(crate) fn dense(tape: &Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    tape.add(tape.matmul(x, w)?, b)
}
