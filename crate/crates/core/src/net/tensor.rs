/// Dense `batch x channels x spatial` array, spatial dims in (x, y, z) order
/// with x fastest in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub batch: usize,
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(batch: usize, channels: usize, dims: [usize; 3]) -> Self {
        let len = batch * channels * dims.iter().product::<usize>();
        Tensor {
            batch,
            channels,
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, dims: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            batch * channels * dims.iter().product::<usize>(),
            "tensor data length does not match shape"
        );
        Tensor {
            batch,
            channels,
            dims,
            data,
        }
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    /// All channels of one batch element.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.channels * self.spatial();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.channels * self.spatial();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let s = self.spatial();
        let off = (n * self.channels + c) * s;
        &self.data[off..off + s]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let s = self.spatial();
        let off = (n * self.channels + c) * s;
        &mut self.data[off..off + s]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.batch == other.batch && self.channels == other.channels && self.dims == other.dims
    }

    /// Concatenates along channels: `[a | b]`.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.batch == b.batch && a.dims == b.dims, "concat shape mismatch");
        let channels = a.channels + b.channels;
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for n in 0..a.batch {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Tensor {
            batch: a.batch,
            channels,
            dims: a.dims,
            data,
        }
    }

    /// Inverse of [`Tensor::concat_channels`]: splits after `first` channels.
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let s = self.spatial();
        let rest = self.channels - first;
        let mut a = Vec::with_capacity(self.batch * first * s);
        let mut b = Vec::with_capacity(self.batch * rest * s);
        for n in 0..self.batch {
            let sample = self.sample(n);
            a.extend_from_slice(&sample[..first * s]);
            b.extend_from_slice(&sample[first * s..]);
        }
        (
            Tensor::from_vec(self.batch, first, self.dims, a),
            Tensor::from_vec(self.batch, rest, self.dims, b),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
