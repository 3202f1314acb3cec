//! Extractor plus scoring head, with the combined training objective.

use super::extractor::Extractor;
use super::head::CosineHead;
use crate::error::{Error, Result};
use crate::losses::{
    bce_with_logits, grad_fd_current, loss_fd, sigmoid, LossWeights,
};
use crate::real::Real;
use ndarray::{Array2, Array4, Axis};

#[derive(Debug, Clone)]
pub struct Network<F> {
    pub extractor: Extractor<F>,
    pub head: CosineHead<F>,
}

impl<F: Real> Network<F> {
    pub fn new(extractor: Extractor<F>, head: CosineHead<F>) -> Result<Self> {
        if extractor.output_dim() != head.dim() {
            return Err(Error::Dimension(format!(
                "extractor produces {}-dim descriptors but head expects {}",
                extractor.output_dim(),
                head.dim()
            )));
        }
        Ok(Self { extractor, head })
    }

    pub fn param_count(&self) -> usize {
        self.extractor.param_count() + self.head.param_count()
    }

    /// Extractor parameters followed by head parameters.
    pub fn read_params(&self) -> Vec<F> {
        let mut p = self.extractor.read_params();
        p.extend(self.head.read_params());
        p
    }

    pub fn write_params(&mut self, vals: &[F]) -> Result<()> {
        let ne = self.extractor.param_count();
        if vals.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "network has {} parameters, got {}",
                self.param_count(),
                vals.len()
            )));
        }
        self.extractor.write_params(&vals[..ne])?;
        self.head.write_params(&vals[ne..])
    }

    /// Inference pass: descriptors and class scores.
    pub fn features_and_scores(&self, x: &Array4<F>) -> (Array2<F>, Array2<F>) {
        let feats = self.extractor.features(x);
        let scores = self.head.scores(&feats);
        (feats, scores)
    }

    /// Mean combined loss over a batch. `targets` is a 0/1 matrix with one
    /// column per current head class. On the first task only classification
    /// applies; afterwards a frozen reference network must be supplied for
    /// the distillation and drift terms.
    pub fn batch_loss(
        &self,
        x: &Array4<F>,
        targets: &Array2<F>,
        frozen: Option<&Network<F>>,
        weights: &LossWeights,
        first_task: bool,
    ) -> Result<F> {
        self.batch_terms(x, targets, frozen, weights, first_task, false)
            .map(|(loss, _)| loss)
    }

    /// Mean combined loss and its gradient with respect to every parameter
    /// (layout matching [`read_params`](Self::read_params)).
    pub fn batch_loss_grads(
        &self,
        x: &Array4<F>,
        targets: &Array2<F>,
        frozen: Option<&Network<F>>,
        weights: &LossWeights,
        first_task: bool,
    ) -> Result<(F, Vec<F>)> {
        self.batch_terms(x, targets, frozen, weights, first_task, true)
            .map(|(loss, grads)| (loss, grads.expect("grads requested")))
    }

    fn batch_terms(
        &self,
        x: &Array4<F>,
        targets: &Array2<F>,
        frozen: Option<&Network<F>>,
        weights: &LossWeights,
        first_task: bool,
        want_grads: bool,
    ) -> Result<(F, Option<Vec<F>>)> {
        let n = x.shape()[0];
        if n == 0 {
            return Err(Error::EmptyDataset("empty training batch".into()));
        }
        if targets.nrows() != n || targets.ncols() != self.head.classes() {
            return Err(Error::Dimension(format!(
                "target matrix {}x{} against batch of {} and {} classes",
                targets.nrows(),
                targets.ncols(),
                n,
                self.head.classes()
            )));
        }
        if first_task && frozen.is_some() {
            return Err(Error::Orchestration(
                "a frozen reference was supplied on the first task".into(),
            ));
        }
        if !first_task && frozen.is_none() {
            return Err(Error::Orchestration(
                "distillation requires the previous task's frozen network".into(),
            ));
        }
        if let Some(fr) = frozen {
            if fr.head.classes() > self.head.classes() {
                return Err(Error::Consistency(format!(
                    "frozen head scores {} classes, current head only {}",
                    fr.head.classes(),
                    self.head.classes()
                )));
            }
        }

        let inv_n = F::one() / F::from_f64(n as f64);
        let tape;
        let feats_owned;
        let feats = if want_grads {
            tape = Some(self.extractor.forward_cached(x));
            tape.as_ref().unwrap().output()
        } else {
            tape = None;
            feats_owned = self.extractor.features(x);
            &feats_owned
        };
        let (scores, head_cache) = self.head.forward_cached(feats);

        // Classification: mean over the batch of summed per-class BCE.
        let mut loss = F::zero();
        for (s, y) in scores.iter().zip(targets.iter()) {
            loss += bce_with_logits(*s, *y);
        }
        loss = loss * inv_n;
        let mut grad_scores = if want_grads {
            let mut g = Array2::<F>::zeros(scores.dim());
            ndarray::Zip::from(&mut g)
                .and(&scores)
                .and(targets)
                .for_each(|g, &s, &y| *g = (sigmoid(s) - y) * inv_n);
            Some(g)
        } else {
            None
        };
        let mut grad_feats_extra: Option<Array2<F>> = None;

        if let Some(fr) = frozen {
            let fr_feats = fr.extractor.features(x);
            let fr_scores = fr.head.scores(&fr_feats);
            let k_prev = fr.head.classes();

            if weights.lambda != 0.0 {
                let lam = F::from_f64(weights.lambda) * inv_n;
                let mut kd = F::zero();
                for row in 0..n {
                    for k in 0..k_prev {
                        let s = scores[[row, k]];
                        let soft = sigmoid(fr_scores[[row, k]]);
                        kd += bce_with_logits(s, soft);
                        if let Some(g) = grad_scores.as_mut() {
                            g[[row, k]] += lam * (sigmoid(s) - soft);
                        }
                    }
                }
                loss += lam * kd;
            }

            if weights.gamma != 0.0 {
                let gam = F::from_f64(weights.gamma) * inv_n;
                let mut fd = F::zero();
                let mut gfe = want_grads.then(|| Array2::<F>::zeros(feats.dim()));
                for row in 0..n {
                    let cur = feats.row(row);
                    let old = fr_feats.row(row);
                    fd += loss_fd(cur, old)?;
                    if let Some(g) = gfe.as_mut() {
                        let gr = grad_fd_current(cur, old);
                        g.row_mut(row).assign(&gr.map(|&v| v * gam));
                    }
                }
                loss += gam * fd;
                grad_feats_extra = gfe;
            }
        }

        if !want_grads {
            return Ok((loss, None));
        }

        let head_grads = self.head.backward(&head_cache, &grad_scores.unwrap());
        let mut grad_feats = head_grads.features;
        if let Some(extra) = grad_feats_extra {
            grad_feats += &extra;
        }

        let ne = self.extractor.param_count();
        let mut grads = vec![F::zero(); self.param_count()];
        self.extractor
            .backward(tape.as_ref().unwrap(), grad_feats, &mut grads[..ne]);
        let mut at = ne;
        for g in head_grads.weight.iter() {
            grads[at] = *g;
            at += 1;
        }
        if let Some(ge) = head_grads.eta {
            grads[at] = ge;
        }
        Ok((loss, Some(grads)))
    }
}

/// One-hot target matrix from per-row column indices.
pub fn one_hot<F: Real>(columns: &[usize], classes: usize) -> Array2<F> {
    let mut t = Array2::zeros((columns.len(), classes));
    for (row, &col) in columns.iter().enumerate() {
        debug_assert!(col < classes);
        t[[row, col]] = F::one();
    }
    t
}

/// Row-normalized copy (each descriptor scaled to unit length).
pub fn normalize_rows<F: Real>(mut feats: Array2<F>) -> Array2<F> {
    for mut row in feats.axis_iter_mut(Axis(0)) {
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
        let scale = F::one() / (norm + F::norm_eps());
        row.mapv_inplace(|v| v * scale);
    }
    feats
}
