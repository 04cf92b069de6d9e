//! Algebraic laws of the residual quantizer.

use musa_core::rvq::{to_storage, EmaSettings, QuantizerBank};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const DIM: usize = 8;
const LAYERS: usize = 8;

fn gaussian_rows(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * DIM).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn trained_bank(k: usize, seed: u64) -> QuantizerBank {
    let ema = EmaSettings {
        decay: 0.99,
        epsilon: 1e-5,
        dead_after: 100,
    };
    let mut bank = QuantizerBank::new(LAYERS, k, DIM, ema);
    bank.init_kmeans(&gaussian_rows(2000, 1.0, seed), &mut ChaCha8Rng::seed_from_u64(seed));
    bank
}

#[test]
fn laws_hold_on_a_thousand_frames() {
    let bank = trained_bank(32, 1);
    let rows = gaussian_rows(1000, 1.0, 99);
    let out = bank.quantize_rows(&rows).unwrap();

    // Telescoping: input == sum of layer outputs + final residual, bit for bit.
    for j in 0..rows.len() {
        let sum: f64 = out.quantized.iter().map(|q| q[j]).sum();
        assert_eq!(out.residual_inputs[0][j], to_storage(rows[j]));
        assert_eq!(out.total[j], sum);
        assert_eq!(out.total[j] + out.final_residual[j], out.residual_inputs[0][j], "element {j}");
    }

    // Reconstruction error never grows from one layer to the next.
    for r in 0..out.rows {
        let e = out.residual_energies(r);
        assert_eq!(e.len(), LAYERS + 1);
        for w in e.windows(2) {
            assert!(w[1] <= w[0], "row {r}: {e:?}");
        }
    }
}

#[test]
fn codeword_input_leaves_no_residual() {
    let bank = trained_bank(16, 2);
    let cb = &bank.layers[0];
    for k in 0..cb.size {
        let out = bank.quantize_rows(cb.entry(k)).unwrap();
        assert_eq!(out.codes[0], vec![k]);
        assert!(out.residual_inputs[1].iter().all(|&v| v == 0.0));
        assert!(out.final_residual.iter().all(|&v| v == 0.0));
        assert_eq!(out.total, cb.entry(k));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn telescoping_and_monotone_energy(seed in 0u64..10_000, scale in 0.01f64..10.0) {
        let bank = trained_bank(8, seed % 7);
        let rows = gaussian_rows(64, scale, seed);
        let out = bank.quantize_rows(&rows).unwrap();
        for j in 0..rows.len() {
            prop_assert_eq!(out.total[j] + out.final_residual[j], out.residual_inputs[0][j]);
        }
        for r in 0..out.rows {
            let e = out.residual_energies(r);
            prop_assert!(e.windows(2).all(|w| w[1] <= w[0]), "{:?}", e);
        }
    }
}
