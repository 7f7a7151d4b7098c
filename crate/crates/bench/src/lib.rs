//! Fixed-seed workloads shared by the benchmarks.

use dictconv_core::{cp_als, quantize, AlsOptions, CpFactors, Dims, KMeansOptions, QuantizedKernel, Tensor4};

/// One convolution layer with its kernel in every supported form.
pub struct Layer {
    pub name: &'static str,
    pub input: Tensor4,
    pub kernel: Tensor4,
    pub quantized: QuantizedKernel,
    pub factors: CpFactors,
}

impl Layer {
    pub fn new(name: &'static str, input_dims: Dims, kernel_dims: Dims, block_len: usize, dict_size: usize, rank: usize) -> Self {
        let kernel = Tensor4::random(kernel_dims, 2).expect("valid dims");
        let quantized = quantize(&kernel, block_len, dict_size, &KMeansOptions::with_seed(3)).expect("valid quantizer");
        let als = AlsOptions {
            max_iters: 50,
            restarts: 1,
            ..AlsOptions::with_seed(4)
        };
        let factors = cp_als(&kernel, rank, &als).expect("valid fit").factors;
        Self {
            name,
            input: Tensor4::random(input_dims, 1).expect("valid dims"),
            kernel,
            quantized,
            factors,
        }
    }
}

/// A small and a mid-sized layer, both with 3×3 windows.
pub fn layers() -> Vec<Layer> {
    vec![
        Layer::new("c16-k16-32x32", [16, 32, 32, 1], [16, 3, 3, 16], 4, 16, 8),
        Layer::new("c64-k64-16x16", [64, 16, 16, 1], [64, 3, 3, 64], 8, 64, 16),
    ]
}
