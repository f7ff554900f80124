use crate::Real;

pub trait Optimizer<T: Real> {
    fn step(&mut self, params: &mut [T], grads: &[T]);
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(num_params: usize, lr: T) -> Self {
        Self {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            weight_decay: T::zero(),
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            t: 0,
        }
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut [T], grads: &[T]) {
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] = params[i] - self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// SGD with classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(num_params: usize, lr: T, momentum: T) -> Self {
        Self { lr, momentum, weight_decay: T::zero(), velocity: vec![T::zero(); num_params] }
    }
}

impl<T: Real> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &mut [T], grads: &[T]) {
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.velocity[i] = self.momentum * self.velocity[i] + g;
            params[i] = params[i] - self.lr * self.velocity[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimise(opt: &mut dyn Optimizer<f64>) -> f64 {
        // f(x) = (x0 - 3)^2 + 2 (x1 + 1)^2
        let mut x = vec![0.0, 0.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (x[0] - 3.0), 4.0 * (x[1] + 1.0)];
            opt.step(&mut x, &g);
        }
        (x[0] - 3.0).abs() + (x[1] + 1.0).abs()
    }

    #[test]
    fn optimizers_converge_on_a_quadratic() {
        assert!(minimise(&mut Adam::new(2, 0.05)) < 1e-3);
        assert!(minimise(&mut Sgd::new(2, 0.05, 0.9)) < 1e-6);
    }
}
