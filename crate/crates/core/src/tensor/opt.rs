//! Adam with global-norm gradient clipping.

use super::Tensor;
use ndarray::ArrayD;

/// Adam over a fixed set of named parameters. `step` consumes the gradients
/// accumulated on the tensors; parameters without a gradient are skipped.
pub struct Adam {
    params: Vec<(String, Tensor)>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
}

impl Adam {
    /// `clip` is the global gradient-norm ceiling; `<= 0` disables clipping.
    pub fn new(params: Vec<(String, Tensor)>, lr: f64, clip: f64) -> Adam {
        let m = params
            .iter()
            .map(|(_, p)| ArrayD::zeros(p.data().raw_dim()))
            .collect();
        let v = params
            .iter()
            .map(|(_, p)| ArrayD::zeros(p.data().raw_dim()))
            .collect();
        Adam {
            params,
            m,
            v,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
        }
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self) -> f64 {
        let grads: Vec<Option<ArrayD<f64>>> =
            self.params.iter().map(|(_, p)| p.take_grad()).collect();
        let norm_sq: f64 = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum();
        let norm = norm_sq.sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, grad) in grads.into_iter().enumerate() {
            let Some(mut g) = grad else { continue };
            if scale != 1.0 {
                g.mapv_inplace(|x| x * scale);
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |mm, &gg| *mm = self.beta1 * *mm + (1.0 - self.beta1) * gg);
            v.zip_mut_with(&g, |vv, &gg| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gg * gg);
            let (_, p) = &self.params[i];
            let mut data = p.data().clone();
            ndarray::Zip::from(&mut data)
                .and(&*m)
                .and(&*v)
                .for_each(|d, &mm, &vv| {
                    let mh = mm / bc1;
                    let vh = vv / bc2;
                    *d -= self.lr * mh / (vh.sqrt() + self.eps);
                });
            p.set_data(data);
        }
        norm
    }

    /// `(name, m, v)` triples for checkpointing.
    pub fn moments(&self) -> Vec<(String, ArrayD<f64>, ArrayD<f64>)> {
        self.params
            .iter()
            .zip(self.m.iter().zip(self.v.iter()))
            .map(|((name, _), (m, v))| (name.clone(), m.clone(), v.clone()))
            .collect()
    }

    /// Restore moments and step count saved by [`Adam::moments`].
    pub fn restore(&mut self, t: u64, moments: &[(String, ArrayD<f64>, ArrayD<f64>)]) {
        assert_eq!(moments.len(), self.params.len(), "optimizer state size mismatch");
        self.t = t;
        for (i, (name, m, v)) in moments.iter().enumerate() {
            assert_eq!(name, &self.params[i].0, "optimizer state name mismatch");
            assert_eq!(m.shape(), self.m[i].shape());
            assert_eq!(v.shape(), self.v[i].shape());
            self.m[i] = m.clone();
            self.v[i] = v.clone();
        }
    }
}
