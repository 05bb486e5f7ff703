/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Default decay constants 0.9 / 0.999 and epsilon 1e-8.
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![vec![1.0, -2.0, 0.5]];
        let mut opt = Adam::new(0.001, &[3]);
        opt.update(&mut p, &[vec![3.0, -0.2, 0.0]]);
        assert!((p[0][0] - 0.999).abs() < 1e-9);
        assert!((p[0][1] + 1.999).abs() < 1e-9);
        assert_eq!(p[0][2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![vec![4.0]];
        let mut opt = Adam::new(0.05, &[1]);
        for _ in 0..2000 {
            let g = vec![vec![2.0 * (p[0][0] - 1.5)]];
            opt.update(&mut p, &g);
        }
        assert!((p[0][0] - 1.5).abs() < 1e-3);
    }
}
