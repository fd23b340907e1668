//! Deterministic fixtures shared by the benchmarks.

use uqseg_core::phantom::{self, DatasetConfig, Phantom};
use uqseg_core::tta::{self, AugmentationPriors};
use uqseg_core::{Modality, SampleStack, SigmoidParams, SigmoidPredictor};

/// A default-config phantom of the given modality.
pub fn phantom(modality: Modality, seed: u64) -> Phantom {
    let spec = phantom::dataset_spec(&DatasetConfig::default(), modality, seed).expect("valid default spec");
    phantom::generate_phantom(&spec, seed).expect("phantom renders")
}

pub fn predictor() -> SigmoidPredictor {
    SigmoidPredictor::new(SigmoidParams::default()).expect("default parameters are valid")
}

/// A TTA stack of `samples` maps for `phantom`.
pub fn tta_stack(phantom: &Phantom, samples: usize, seed: u64) -> SampleStack {
    tta::tta_sample_stack(&predictor(), &phantom.image, samples, &AugmentationPriors::default(), seed)
        .expect("sigmoid predictor cannot fail")
}
