use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Matrix;

/// A reproducible random stream: ChaCha8 keyed by `seed`, on stream `stream_id`.
///
/// ChaCha output and the ziggurat normal sampler are both platform
/// independent, so a given `(seed, stream_id)` yields the same draws everywhere.
/// Concurrent trials take distinct stream ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// A sibling stream, e.g. one per trial.
    pub fn substream(&self, offset: u64) -> Self {
        Self::new(self.seed, self.stream_id.wrapping_add(offset))
    }

    pub fn sampler(&self) -> Sampler {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        Sampler { rng }
    }

    /// Fresh `rows × cols` standard-normal matrix from the start of the stream.
    pub fn gaussian(&self, rows: usize, cols: usize) -> Matrix {
        self.sampler().gaussian(rows, cols)
    }
}

/// Stateful draws from an [`RngStream`].
#[derive(Clone, Debug)]
pub struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn uniform(&mut self) -> f64 {
        use rand::Rng;
        self.rng.random::<f64>()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        use rand::Rng;
        self.rng.random_range(0..n)
    }

    pub fn gaussian(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| self.normal()).collect();
        Matrix::from_raw(rows, cols, data)
    }

    /// Normal entries with standard deviation `std`, redrawn outside `±2·std`.
    pub fn truncated_normal(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| loop {
                let z = self.normal();
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Matrix::from_raw(rows, cols, data)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

/// Validated wrapper around [`RngStream::gaussian`].
pub fn random_gaussian(
    rows: usize,
    cols: usize,
    stream: RngStream,
) -> Result<Matrix, super::LinalgError> {
    if rows == 0 || cols == 0 {
        return Err(super::LinalgError::EmptyShape { rows, cols });
    }
    Ok(stream.gaussian(rows, cols))
}
