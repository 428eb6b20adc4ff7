use nucleidiff_core::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub shape: Vec<usize>,
}

impl<F: Scalar> Param<F> {
    pub fn filled(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Self { value: vec![v; n], grad: vec![F::zero(); n], shape: shape.to_vec() }
    }

    /// `U(-bound, bound)` entries.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let value = (0..n).map(|_| F::lit(rng.random_range(-bound..=bound))).collect();
        Self { value, grad: vec![F::zero(); n], shape: shape.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Anything that owns parameters. Visit order is stable and defines the
/// layout of optimizer state, EMA shadows and checkpoints.
pub trait Module<F: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    /// Parameter names in visit order.
    fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _| names.push(name.to_string()));
        names
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
