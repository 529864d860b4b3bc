//! Sequential models with exact per-example backpropagation.

use std::collections::HashSet;
use std::ops::Range;

use rayon::prelude::*;

use super::layer::{backward_example, forward_example, Aux, Layer};
use super::loss::{example_loss, example_loss_grad};
use super::norm::{ws_backward, ws_forward};
use super::{NnError, Result};
use crate::tensor::Tensor;

/// An ordered stack of named layers mapping one input item to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// `shapes[i]` is the per-example input shape of layer `i`; the last
    /// entry is the logits shape.
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
}

impl Model {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::InvalidHyper("model needs at least one layer".into()));
        }
        let mut seen = HashSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(NnError::InvalidHyper(format!("duplicate layer name `{}`", l.name)));
            }
        }
        let mut shapes = vec![input_shape.clone()];
        for l in &layers {
            let next = l.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out.len() != 1 {
            return Err(NnError::Shape {
                layer: layers.last().unwrap().name.clone(),
                expected: "[classes]".into(),
                actual: out.clone(),
            });
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut acc = 0;
        for l in &layers {
            offsets.push(acc);
            acc += l.num_params();
        }
        offsets.push(acc);
        Ok(Self {
            input_shape,
            layers,
            shapes,
            offsets,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    /// Total scalar parameter count `d`.
    pub fn num_params(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Coordinates of layer `i` inside the flattened parameter vector.
    pub fn param_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Indices of layers that own parameters, in forward order.
    pub fn parameterized_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].has_params())
            .collect()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            for (_, t) in l.params() {
                out.extend_from_slice(t.data());
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(NnError::InvalidHyper(format!(
                "parameter vector has {} entries, model has {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            for t in l.params_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&params[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    /// Replace the parameters of a single layer (flattened, canonical order).
    pub fn set_layer_params(&mut self, i: usize, params: &[f64]) -> Result<()> {
        let range = self.param_range(i);
        if params.len() != range.len() {
            return Err(NnError::InvalidHyper(format!(
                "{}: expected {} parameters, got {}",
                self.layers[i].name,
                range.len(),
                params.len()
            )));
        }
        let mut at = 0;
        for t in self.layers[i].params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&params[at..at + n]);
            at += n;
        }
        Ok(())
    }

    fn check_batch(&self, x: &Tensor) -> Result<usize> {
        if x.shape().len() != self.input_shape.len() + 1 || x.item_shape() != self.input_shape.as_slice() {
            return Err(NnError::Shape {
                layer: self.layers[0].name.clone(),
                expected: format!("[batch, {:?}]", self.input_shape),
                actual: x.shape().to_vec(),
            });
        }
        Ok(x.batch_len())
    }

    /// Precompute effective weights (standardized where enabled).
    pub fn evaluator(&self) -> Evaluator<'_> {
        let standardized = self
            .layers
            .iter()
            .map(|l| {
                l.standardized_weight().map(|w| {
                    let rows = w.shape()[0];
                    let mut w_hat = vec![0.0; w.len()];
                    let mut inv_std = vec![0.0; rows];
                    ws_forward(w.data(), rows, &mut w_hat, &mut inv_std);
                    Standardized { w_hat, inv_std }
                })
            })
            .collect();
        Evaluator {
            model: self,
            standardized,
        }
    }

    /// Logits `[batch, classes]` for a batch `[batch, ...input_shape]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(x)?;
        let eval = self.evaluator();
        let mut out = Vec::with_capacity(n * self.num_classes());
        for i in 0..n {
            out.extend(eval.logits(x.item(i))?);
        }
        Ok(Tensor::new(vec![n, self.num_classes()], out).expect("logit shape"))
    }

    /// One full gradient row per example; row `i` is the gradient of
    /// example `i`'s loss alone.
    pub fn backward_per_example(&self, x: &Tensor, labels: &[usize]) -> Result<PerExampleGrads> {
        let n = self.check_batch(x)?;
        if n == 0 || labels.len() != n {
            return Err(NnError::InvalidHyper(format!(
                "batch of {n} inputs with {} labels",
                labels.len()
            )));
        }
        let eval = self.evaluator();
        let d = self.num_params();
        let rows = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = vec![0.0; d];
                eval.gradient(x.item(i), labels[i], None, &mut g)?;
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = PerExampleGrads::new(d);
        for r in &rows {
            grads.push_row(r);
        }
        Ok(grads)
    }

    /// Fraction of examples whose arg-max logit equals the label.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let n = self.check_batch(x)?;
        if n == 0 {
            return Ok(0.0);
        }
        let eval = self.evaluator();
        let correct = (0..n)
            .into_par_iter()
            .map(|i| eval.logits(x.item(i)).map(|z| usize::from(argmax(&z) == labels[i])))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(correct as f64 / n as f64)
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

struct Standardized {
    w_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// A model with its effective weights prepared, for repeated single-example
/// evaluation.
pub struct Evaluator<'m> {
    model: &'m Model,
    standardized: Vec<Option<Standardized>>,
}

impl Evaluator<'_> {
    pub fn model(&self) -> &Model {
        self.model
    }

    fn weight(&self, i: usize) -> Option<&[f64]> {
        if let Some(s) = &self.standardized[i] {
            return Some(&s.w_hat);
        }
        self.model.layers[i].params().first().map(|(_, t)| t.data())
    }

    fn check_item(&self, x: &[f64]) -> Result<()> {
        let expected: usize = self.model.input_shape.iter().product();
        if x.len() != expected {
            return Err(NnError::Shape {
                layer: self.model.layers[0].name.clone(),
                expected: format!("{:?}", self.model.input_shape),
                actual: vec![x.len()],
            });
        }
        Ok(())
    }

    /// Logits for one example.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_item(x)?;
        let m = self.model;
        let mut act = x.to_vec();
        let mut aux = Aux::default();
        for (i, l) in m.layers.iter().enumerate() {
            act = forward_example(l, self.weight(i), &act, &m.shapes[i], &m.shapes[i + 1], &mut aux);
            if !act.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite { layer: l.name.clone() });
            }
        }
        Ok(act)
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        example_loss(&self.logits(x)?, label)
    }

    /// Gradient of one example's loss, written into `grad` (length `d`).
    ///
    /// When `layers` is given only layers flagged `true` get parameter
    /// gradients; the other coordinates of `grad` are left untouched and
    /// backpropagation stops below the lowest flagged layer.
    pub fn gradient(
        &self,
        x: &[f64],
        label: usize,
        layers: Option<&[bool]>,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_item(x)?;
        let m = self.model;
        let n_layers = m.layers.len();
        debug_assert_eq!(grad.len(), m.num_params());
        let wants = |i: usize| layers.is_none_or(|f| f[i]) && m.layers[i].has_params();

        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        let mut auxes: Vec<Aux> = Vec::with_capacity(n_layers);
        acts.push(x.to_vec());
        for (i, l) in m.layers.iter().enumerate() {
            let mut aux = Aux::default();
            let out = forward_example(l, self.weight(i), &acts[i], &m.shapes[i], &m.shapes[i + 1], &mut aux);
            if !out.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite { layer: l.name.clone() });
            }
            acts.push(out);
            auxes.push(aux);
        }

        let logits = &acts[n_layers];
        let mut dy = vec![0.0; logits.len()];
        let loss = example_loss_grad(logits, label, &mut dy)?;

        let Some(lowest) = (0..n_layers).find(|&i| wants(i)) else {
            return Ok(loss);
        };
        for i in (lowest..n_layers).rev() {
            let l = &m.layers[i];
            let range = m.param_range(i);
            let need_dx = i > lowest;
            let standardized = self.standardized[i].as_ref();
            let dx = if wants(i) {
                let slot = &mut grad[range.clone()];
                match standardized {
                    // Gradient w.r.t. the standardized weight, then through
                    // the standardization into the raw weight.
                    Some(s) => {
                        let mut tmp = vec![0.0; range.len()];
                        let dx = backward_example(
                            l,
                            self.weight(i),
                            &acts[i],
                            &m.shapes[i],
                            &m.shapes[i + 1],
                            &auxes[i],
                            &dy,
                            Some(&mut tmp),
                            need_dx,
                        );
                        let wlen = s.w_hat.len();
                        slot[..wlen].fill(0.0);
                        ws_backward(&tmp[..wlen], &s.w_hat, &s.inv_std, &mut slot[..wlen]);
                        slot[wlen..].copy_from_slice(&tmp[wlen..]);
                        dx
                    }
                    None => {
                        slot.fill(0.0);
                        backward_example(
                            l,
                            self.weight(i),
                            &acts[i],
                            &m.shapes[i],
                            &m.shapes[i + 1],
                            &auxes[i],
                            &dy,
                            Some(slot),
                            need_dx,
                        )
                    }
                }
            } else {
                backward_example(
                    l,
                    self.weight(i),
                    &acts[i],
                    &m.shapes[i],
                    &m.shapes[i + 1],
                    &auxes[i],
                    &dy,
                    None,
                    need_dx,
                )
            };
            if wants(i) && !grad[range].iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite { layer: l.name.clone() });
            }
            if let Some(dx) = dx {
                if !dx.iter().all(|v| v.is_finite()) {
                    return Err(NnError::NonFinite { layer: l.name.clone() });
                }
                dy = dx;
            }
        }
        Ok(loss)
    }
}

/// Per-example flattened gradient rows for one microbatch.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGrads {
    dim: usize,
    data: Vec<f64>,
    clipped: bool,
}

impl PerExampleGrads {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            clipped: false,
        }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Self {
        let mut g = Self::new(dim);
        for r in rows {
            g.push_row(r);
        }
        g
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim, "gradient row length");
        self.data.extend_from_slice(row);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn is_clipped(&self) -> bool {
        self.clipped
    }

    pub(crate) fn mark_clipped(&mut self) {
        self.clipped = true;
    }
}
