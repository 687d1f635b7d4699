use std::ops::{Index, IndexMut};

/// Dense single-channel `f64` plane, row-major. The working type of every
/// numeric kernel; `NaN` marks an invalid sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        Grid {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, 0.0)
    }

    /// Panics if `data.len() != width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length mismatch");
        Grid {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn add_at(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] += v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_dims(&self, other: &Grid) -> bool {
        self.dims() == other.dims()
    }

    /// Sample is finite and strictly positive (the validity test for depth).
    #[inline]
    pub fn is_valid_depth(&self, x: usize, y: usize) -> bool {
        let d = self.get(x, y);
        d.is_finite() && d > 0.0
    }
}

impl Index<(usize, usize)> for Grid {
    type Output = f64;

    #[inline]
    fn index(&self, (x, y): (usize, usize)) -> &f64 {
        &self.data[y * self.width + x]
    }
}

impl IndexMut<(usize, usize)> for Grid {
    #[inline]
    fn index_mut(&mut self, (x, y): (usize, usize)) -> &mut f64 {
        &mut self.data[y * self.width + x]
    }
}

/// Mean over the entries where `mask` is set, summed in index order.
pub fn masked_mean(values: &Grid, mask: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, &m) in values.data().iter().zip(mask) {
        if m {
            sum += v;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}
