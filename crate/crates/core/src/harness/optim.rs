//! Adam with global-norm gradient clipping and float32 rounding of the
//! updated parameters, so that checkpoint round-trips through the f32
//! on-disk format resume bit-exactly.

use ndarray::ArrayD;

/// First/second-moment state for one named parameter list. The caller owns
/// the parameter arrays and passes matching slices to every step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Round parameters to f32 after each update (checkpoint-exact resume).
    pub round_to_f32: bool,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, clip_norm: Option<f64>) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm,
            round_to_f32: true,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` may be `None` for parameters that did
    /// not participate in this step's graph; their moments still decay.
    pub fn step(&mut self, params: &mut [&mut ArrayD<f64>], grads: &[Option<ArrayD<f64>>]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer state size changed");
        let scale = match self.clip_norm {
            Some(limit) => {
                let sq: f64 = grads
                    .iter()
                    .flatten()
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                    .sum();
                let norm = sq.sqrt();
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let zero = ArrayD::zeros(p.raw_dim());
            let g = grads[i].as_ref().unwrap_or(&zero);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(&mut **p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + self.epsilon);
                    *p -= self.learning_rate * update;
                    if self.round_to_f32 {
                        // Moments are rounded too so the whole optimizer
                        // state survives the f32 on-disk format exactly.
                        *p = *p as f32 as f64;
                        *m = *m as f32 as f64;
                        *v = *v as f32 as f64;
                    }
                });
        }
    }

    /// Optimizer state for checkpointing: step count, first moments, second
    /// moments (in parameter order).
    pub fn state(&self) -> (u64, &[ArrayD<f64>], &[ArrayD<f64>]) {
        (self.step, &self.m, &self.v)
    }

    /// Restores a previously exported state.
    pub fn restore(&mut self, step: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        assert_eq!(m.len(), v.len(), "moment list length mismatch");
        self.step = step;
        self.m = m;
        self.v = v;
    }
}
