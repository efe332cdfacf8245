#![allow(dead_code)]

use onconet::exam::{make_phantom_pair, ModelInput, PhantomSpec, Preprocess};
use onconet::labels::ResponseLabel;
use onconet::train::InputPair;
use onconet::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_input<T: Scalar>(rng: &mut ChaCha8Rng, l: usize, s: usize) -> ModelInput<T> {
    let t = Tensor::from_fn(&[2, l, s, s], |_| T::from_f64_lossy(rng.random_range(-1.0..1.0)));
    ModelInput::from_tensor(t).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Balanced phantom specs on a small acquisition grid.
pub fn phantom_specs(offset: u64, n: usize, l: usize) -> Vec<PhantomSpec> {
    (0..n)
        .map(|i| {
            let mut s = PhantomSpec::random(offset + i as u64, ResponseLabel::ALL[i % 3], l, 64, 32);
            s.patient_id = format!("P{}", offset + i as u64);
            s
        })
        .collect()
}

pub fn phantom_inputs(specs: &[PhantomSpec], grid: usize) -> Vec<InputPair<f32>> {
    let prep = Preprocess::with_grid(grid);
    specs
        .iter()
        .map(|s| InputPair::from_exam_pair(&make_phantom_pair(s).unwrap().0, &prep))
        .collect()
}
