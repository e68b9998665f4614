use crate::float::Float;

/// Dense row-major n-dimensional array.
///
/// Activations inside the engine use channel-major batch layout
/// `[C, N, H, W]` so that a convolution is a single matrix product whose
/// output lands directly in that layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {:?} does not match {} values", shape, data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Self {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape changes element count");
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} values", self.data.len());
        self.data[0]
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts an `[N, C, H, W]` tensor into the engine's `[C, N, H, W]` layout
    /// (the permutation is its own inverse).
    pub fn swap_batch_channel(&self) -> Self {
        assert_eq!(self.shape.len(), 4, "swap_batch_channel expects 4 axes");
        let (a, b, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let plane = h * w;
        let mut out = vec![T::zero(); self.data.len()];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * plane;
                let dst = (j * a + i) * plane;
                out[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        Self { shape: vec![b, a, h, w], data: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swap_batch_channel_is_an_involution() {
        let t = Tensor::<f32>::new(vec![2, 3, 2, 2], (0..24).map(|v| v as f32).collect());
        let s = t.swap_batch_channel();
        assert_eq!(s.shape(), &[3, 2, 2, 2]);
        // element (n=1, c=2, 0, 1) moves to (c=2, n=1, 0, 1)
        assert_eq!(t.data()[(1 * 3 + 2) * 4 + 1], s.data()[(2 * 2 + 1) * 4 + 1]);
        assert_eq!(s.swap_batch_channel(), t);
    }

    #[test]
    #[should_panic]
    fn new_rejects_bad_length() {
        let _ = Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]);
    }
}
