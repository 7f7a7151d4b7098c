use dictconv_core::pipeline::{GridAxis, TensorSource};
use dictconv_core::{
    cp_als, cp_reconstruct, extract_blocks, relative_error, run_pipeline, sweep, AlsOptions, CpFactors, LayerConfig,
    LayerMode, SweepGrid, Tensor4,
};

const SIZES: [usize; 4] = [4, 16, 64, 256];

fn toy_net() -> (Tensor4, Vec<LayerConfig>) {
    let input = Tensor4::random([3, 16, 16, 1], 1).unwrap();
    let layers = [[3, 3, 3, 8], [8, 3, 3, 8], [8, 3, 3, 4]]
        .iter()
        .enumerate()
        .map(|(i, &d)| LayerConfig {
            kernel: Tensor4::random(d, 10 + i as u64).unwrap(),
            mode: LayerMode::Direct,
        })
        .collect();
    (input, layers)
}

fn block_len(layer: usize) -> usize {
    if layer == 0 {
        3
    } else {
        4
    }
}

#[test]
fn layerwise_dict_sweep_improves_with_dictionary_size() {
    let (x, layers) = toy_net();
    for layer in 0..layers.len() {
        let grid = SweepGrid {
            axes: vec![GridAxis {
                layer,
                modes: SIZES.iter().map(|&d| LayerMode::dict(block_len(layer), d, 7)).collect(),
            }],
        };
        let rows = sweep(&x, &layers, &grid).unwrap();
        assert_eq!(rows.len(), SIZES.len());
        let (first, last) = (rows[0].relative_error, rows[SIZES.len() - 1].relative_error);
        assert!(last < first, "layer {layer}: {last} !< {first}");
    }
}

#[test]
fn dict_size_extremes_span_the_error_range() {
    let (x, layers) = toy_net();
    let distinct = extract_blocks(&layers[1].kernel, 4).unwrap().distinct_count();
    let grid = SweepGrid {
        axes: vec![GridAxis {
            layer: 1,
            modes: vec![LayerMode::dict(4, 1, 3), LayerMode::dict(4, distinct, 3)],
        }],
    };
    let rows = sweep(&x, &layers, &grid).unwrap();
    assert!(rows[0].relative_error > 0.1, "{}", rows[0].relative_error);
    assert!(rows[1].relative_error <= 1e-5, "{}", rows[1].relative_error);
}

#[test]
fn direct_replacement_never_increases_error() {
    let (x, mut layers) = toy_net();
    // Moderate approximation. With very coarse layers the per-layer errors
    // can partially cancel and the property no longer holds.
    layers[0].mode = LayerMode::dict(3, 64, 1);
    layers[1].mode = LayerMode::cp(6, 2);
    layers[2].mode = LayerMode::dict(4, 64, 3);
    let all = run_pipeline(&x, &layers).unwrap().relative_error;
    for i in 0..layers.len() {
        let mut swapped = layers.clone();
        swapped[i].mode = LayerMode::Direct;
        let e = run_pipeline(&x, &swapped).unwrap().relative_error;
        assert!(e <= all, "layer {i}: {e} > {all}");
    }
}

#[test]
fn rank_grid_recovers_rank_four_kernel() {
    let dims = [4, 3, 3, 5];
    let w = TensorSource::Random { seed: 21, dims, rank: Some(4) }.load(".".as_ref()).unwrap();
    let mut errors = Vec::new();
    for rank in 1..=6 {
        let opts = AlsOptions { max_iters: 5000, rel_fit_tol: 1e-12, ..AlsOptions::with_seed(5) };
        let fit = cp_als(&w, rank, &opts).unwrap();
        errors.push(relative_error(&w, &cp_reconstruct(&fit.factors, dims).unwrap()).unwrap());
    }
    for (r, e) in errors.iter().enumerate().skip(3) {
        assert!(*e <= 1e-5, "R={} error {e}", r + 1);
    }
    assert!(errors[5] < errors[0]);
}

#[test]
fn cp_rank_sweep_in_pipeline() {
    let input = Tensor4::random([4, 10, 10, 1], 3).unwrap();
    let dims = [4, 3, 3, 5];
    let kernel = cp_reconstruct(&CpFactors::random(dims, 4, 21).unwrap(), dims).unwrap();
    let layers = vec![LayerConfig { kernel, mode: LayerMode::Direct }];
    let grid = SweepGrid {
        axes: vec![GridAxis {
            layer: 0,
            modes: vec![
                LayerMode::Cp { rank: 1, seed: 5, max_iters: Some(2000) },
                LayerMode::Cp { rank: 6, seed: 5, max_iters: Some(2000) },
            ],
        }],
    };
    let rows = sweep(&input, &layers, &grid).unwrap();
    assert!(rows[1].relative_error < rows[0].relative_error);
}

#[test]
fn sweep_is_deterministic() {
    let (x, layers) = toy_net();
    let grid = SweepGrid {
        axes: vec![
            GridAxis { layer: 0, modes: vec![LayerMode::dict(3, 4, 1), LayerMode::cp(2, 1)] },
            GridAxis { layer: 2, modes: vec![LayerMode::dict(2, 8, 2), LayerMode::Direct] },
        ],
    };
    assert_eq!(sweep(&x, &layers, &grid).unwrap(), sweep(&x, &layers, &grid).unwrap());
}
