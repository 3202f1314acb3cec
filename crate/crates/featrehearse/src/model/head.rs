//! Cosine-similarity scoring head.
//!
//! Scores are scaled cosines between the feature vector and one learned
//! weight vector per class: s_{nk} = eta * cos(v_n, w_k). Normalizing both
//! sides removes the magnitude bias that otherwise favors classes with many
//! recent training examples. The scale eta is a learnable scalar (frozen to
//! 1 when disabled).

use super::init::fan_in_uniform;
use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CosineHead<F> {
    /// (dim, classes): one column per class.
    weight: Array2<F>,
    eta: Option<F>,
}

/// Intermediate values a backward pass needs.
pub struct HeadCache<F> {
    features: Array2<F>,
    /// 1 / (||v_n|| + eps)
    a: Array1<F>,
    /// 1 / ||v_n|| (0 when the norm is 0)
    inv_v: Array1<F>,
    b: Array1<F>,
    inv_w: Array1<F>,
    cosines: Array2<F>,
}

pub struct HeadGrads<F> {
    pub features: Array2<F>,
    pub weight: Array2<F>,
    pub eta: Option<F>,
}

fn guard_inv<F: Real>(norm: F) -> F {
    if norm > F::zero() {
        F::one() / norm
    } else {
        F::zero()
    }
}

impl<F: Real> CosineHead<F> {
    pub fn new(dim: usize, classes: usize, eta: Option<F>, rng: &mut ChaCha8Rng) -> Self {
        let mut head = Self {
            weight: Array2::zeros((dim, 0)),
            eta,
        };
        head.widen(classes, rng);
        head
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }
    pub fn classes(&self) -> usize {
        self.weight.ncols()
    }
    pub fn eta(&self) -> Option<F> {
        self.eta
    }
    pub fn weight(&self) -> &Array2<F> {
        &self.weight
    }

    /// Appends `extra` freshly initialized class columns; existing columns
    /// are preserved exactly.
    pub fn widen(&mut self, extra: usize, rng: &mut ChaCha8Rng) {
        let dim = self.dim();
        let old = self.classes();
        let mut weight = Array2::zeros((dim, old + extra));
        weight
            .slice_mut(ndarray::s![.., ..old])
            .assign(&self.weight);
        for k in old..old + extra {
            for i in 0..dim {
                weight[[i, k]] = fan_in_uniform::<F>(dim, rng);
            }
        }
        self.weight = weight;
    }

    fn norms(&self, feats: &Array2<F>) -> (Array1<F>, Array1<F>, Array1<F>, Array1<F>) {
        let vn = feats.map_axis(Axis(1), |r| {
            r.iter().map(|&x| x * x).sum::<F>().sqrt()
        });
        let wn = self.weight.map_axis(Axis(0), |c| {
            c.iter().map(|&x| x * x).sum::<F>().sqrt()
        });
        let a = vn.map(|&n| F::one() / (n + F::norm_eps()));
        let b = wn.map(|&n| F::one() / (n + F::norm_eps()));
        (a, vn.map(|&n| guard_inv(n)), b, wn.map(|&n| guard_inv(n)))
    }

    fn eta_value(&self) -> F {
        self.eta.unwrap_or_else(F::one)
    }

    /// Inference scores (N, classes).
    pub fn scores(&self, feats: &Array2<F>) -> Array2<F> {
        let (a, _, b, _) = self.norms(feats);
        let mut s = feats.dot(&self.weight);
        let eta = self.eta_value();
        for ((n, k), v) in s.indexed_iter_mut() {
            *v = *v * a[n] * b[k] * eta;
        }
        s
    }

    pub fn forward_cached(&self, feats: &Array2<F>) -> (Array2<F>, HeadCache<F>) {
        let (a, inv_v, b, inv_w) = self.norms(feats);
        let mut cosines = feats.dot(&self.weight);
        for ((n, k), v) in cosines.indexed_iter_mut() {
            *v = *v * a[n] * b[k];
        }
        let scores = cosines.map(|&c| c * self.eta_value());
        (
            scores,
            HeadCache {
                features: feats.clone(),
                a,
                inv_v,
                b,
                inv_w,
                cosines,
            },
        )
    }

    /// Exact gradients of the cached forward pass.
    pub fn backward(&self, cache: &HeadCache<F>, grad_scores: &Array2<F>) -> HeadGrads<F> {
        let eta = self.eta_value();
        let h = grad_scores.map(|&g| g * eta);
        let gc = grad_scores * &cache.cosines;

        // grad features: a_n * [ H (W*b)^T ]_n  -  a_n * rowdot_n * v_n / ||v_n||
        let mut wb = self.weight.clone();
        for (k, mut col) in wb.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|x| x * cache.b[k]);
        }
        let mut grad_feats = h.dot(&wb.t());
        let rowdot = (&h * &cache.cosines).sum_axis(Axis(1));
        for (n, mut row) in grad_feats.axis_iter_mut(Axis(0)).enumerate() {
            let scale = cache.a[n] * rowdot[n] * cache.inv_v[n];
            ndarray::Zip::from(&mut row)
                .and(cache.features.row(n))
                .for_each(|g, &v| *g = *g * cache.a[n] - scale * v);
        }

        // grad weight: b_k * [ (V*a)^T H ]_k  -  b_k * coldot_k * w_k / ||w_k||
        let mut va = cache.features.clone();
        for (n, mut row) in va.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|x| x * cache.a[n]);
        }
        let mut grad_weight = va.t().dot(&h);
        let coldot = (&h * &cache.cosines).sum_axis(Axis(0));
        for (k, mut col) in grad_weight.axis_iter_mut(Axis(1)).enumerate() {
            let scale = cache.b[k] * coldot[k] * cache.inv_w[k];
            ndarray::Zip::from(&mut col)
                .and(self.weight.column(k))
                .for_each(|g, &w| *g = *g * cache.b[k] - scale * w);
        }

        let grad_eta = self.eta.map(|_| gc.sum());
        HeadGrads {
            features: grad_feats,
            weight: grad_weight,
            eta: grad_eta,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + usize::from(self.eta.is_some())
    }

    pub fn read_params(&self) -> Vec<F> {
        let mut out: Vec<F> = self.weight.iter().copied().collect();
        if let Some(e) = self.eta {
            out.push(e);
        }
        out
    }

    pub fn write_params(&mut self, vals: &[F]) -> Result<()> {
        if vals.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "head has {} parameters, got {}",
                self.param_count(),
                vals.len()
            )));
        }
        for (w, &v) in self.weight.iter_mut().zip(vals) {
            *w = v;
        }
        if self.eta.is_some() {
            self.eta = Some(vals[vals.len() - 1]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::arr2;

    #[test]
    fn scores_are_scaled_cosines() {
        let mut head = CosineHead::<f64>::new(2, 2, Some(3.0), &mut stream_rng(0, "h", 0));
        head.write_params(&[1.0, 0.0, 0.0, 2.0, 3.0]).unwrap();
        // w0 = (1,0), w1 = (0,2); features (2,0) and (1,1)
        let v = arr2(&[[2.0, 0.0], [1.0, 1.0]]);
        let s = head.scores(&v);
        assert!((s[[0, 0]] - 3.0).abs() < 1e-9);
        assert!(s[[0, 1]].abs() < 1e-9);
        let r = 1.0 / 2.0f64.sqrt();
        assert!((s[[1, 0]] - 3.0 * r).abs() < 1e-9);
        assert!((s[[1, 1]] - 3.0 * r).abs() < 1e-9);
    }

    #[test]
    fn scores_ignore_feature_magnitude() {
        let head = CosineHead::<f64>::new(4, 3, None, &mut stream_rng(1, "h", 0));
        let v = arr2(&[[0.3, -0.2, 0.9, 0.1]]);
        let v10 = v.map(|x| x * 10.0);
        let s1 = head.scores(&v);
        let s2 = head.scores(&v10);
        for (x, y) in s1.iter().zip(s2.iter()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn widen_preserves_existing_columns() {
        let mut head = CosineHead::<f32>::new(5, 2, Some(10.0), &mut stream_rng(2, "h", 0));
        let before = head.weight().clone();
        head.widen(3, &mut stream_rng(2, "h", 1));
        assert_eq!(head.classes(), 5);
        assert_eq!(head.weight().slice(ndarray::s![.., ..2]), before);
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        let mut rng = stream_rng(3, "hfd", 0);
        let mut head = CosineHead::<f64>::new(5, 3, Some(1.7), &mut rng);
        let v = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let loss =
            |h: &CosineHead<f64>, v: &Array2<f64>| (&h.scores(v) * &probe).sum();

        let (_, cache) = head.forward_cached(&v);
        let grads = head.backward(&cache, &probe);

        let eps = 1e-6;
        for idx in [[0, 0], [4, 2], [2, 1]] {
            let mut w = head.read_params();
            let flat = idx[0] * 3 + idx[1];
            w[flat] += eps;
            head.write_params(&w).unwrap();
            let up = loss(&head, &v);
            w[flat] -= 2.0 * eps;
            head.write_params(&w).unwrap();
            let dn = loss(&head, &v);
            w[flat] += eps;
            head.write_params(&w).unwrap();
            let fd = (up - dn) / (2.0 * eps);
            assert!(
                (fd - grads.weight[idx]).abs() < 1e-6,
                "weight {idx:?}: {fd} vs {}",
                grads.weight[idx]
            );
        }
        for idx in [[0, 0], [3, 4], [1, 2]] {
            let mut vp = v.clone();
            vp[idx] += eps;
            let up = loss(&head, &vp);
            vp[idx] -= 2.0 * eps;
            let dn = loss(&head, &vp);
            let fd = (up - dn) / (2.0 * eps);
            assert!(
                (fd - grads.features[idx]).abs() < 1e-6,
                "features {idx:?}: {fd} vs {}",
                grads.features[idx]
            );
        }
        {
            let mut p = head.read_params();
            let last = p.len() - 1;
            p[last] += eps;
            head.write_params(&p).unwrap();
            let up = loss(&head, &v);
            p[last] -= 2.0 * eps;
            head.write_params(&p).unwrap();
            let dn = loss(&head, &v);
            let fd = (up - dn) / (2.0 * eps);
            assert!((fd - grads.eta.unwrap()).abs() < 1e-6);
        }
    }
}
