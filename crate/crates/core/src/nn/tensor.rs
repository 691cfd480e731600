//! Dense f64 tensor with shape checking. Feature maps are [C, H, W];
//! vectors and tables use 1-D/2-D shapes.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not fit {} values",
            dims,
            data.len()
        );
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    /// [C, H, W] accessor.
    pub fn chw(&self) -> (usize, usize, usize) {
        debug_assert_eq!(self.dims.len(), 3, "expected [C,H,W], got {:?}", self.dims);
        (self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.chw();
        self.data[(c * h + y) * w + x]
    }

    #[cfg(debug_assertions)]
    pub fn debug_check_finite(&self, what: &str) {
        if let Some(bad) = self.data.iter().find(|v| !v.is_finite()) {
            panic!("non-finite value {bad} in {what}");
        }
    }

    #[cfg(not(debug_assertions))]
    pub fn debug_check_finite(&self, _what: &str) {}
}
