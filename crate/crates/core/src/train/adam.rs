pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// Adam state for one flat parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + EPSILON);
        }
    }

    /// Rebuilds the moments after the parameter rows were reshuffled: row `i`
    /// of the result copies row `source[i]` (or starts at zero when `None`).
    /// Each row is `width` consecutive entries.
    pub fn remap_rows(&mut self, source: &[Option<usize>], width: usize) {
        let pick = |old: &[f64]| -> Vec<f64> {
            source
                .iter()
                .flat_map(|s| match s {
                    Some(i) => old[i * width..(i + 1) * width].to_vec(),
                    None => vec![0.0; width],
                })
                .collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}
