//! Training of the toothless-to-toothed mouth translator.
//!
//! The translator reuses the texture autoencoder: phase one autoencodes the
//! toothed patches jointly (the decoder learns the space of closed-cavity
//! mouth appearances), phase two freezes helpers and retargets the encoder
//! from reconstruction to translation — toothless input, paired toothed
//! target — so `decode(encode(toothless))` approximates the real mouth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::texture_space::{
    prepare_images, run_phase, PerceptualExtractor, TextureConfig, TextureModel, TextureTrainLog,
};

use super::{MouthError, MouthPatch};

/// Trains the mouth translator on (toothless, toothed) patch pairs. Patch
/// sides must equal `config.tex_size`. Deterministic per seed; the returned
/// log carries the same curves as texture training, with the phase-two
/// segment describing translation quality.
pub fn train_mouth_translator(
    pairs: &[(MouthPatch, MouthPatch)],
    config: &TextureConfig,
    seed: u64,
) -> Result<(TextureModel, TextureTrainLog), MouthError> {
    if pairs.is_empty() {
        return Err(MouthError::EmptyPairs);
    }
    config.validate()?;
    for (toothless, toothed) in pairs {
        for patch in [toothless, toothed] {
            if patch.size() != config.tex_size {
                return Err(MouthError::WrongPatchSize(
                    patch.frame_index,
                    patch.image.width(),
                    patch.image.height(),
                    config.tex_size,
                ));
            }
        }
    }
    let toothless: Vec<&Image> = pairs.iter().map(|(a, _)| &a.image).collect();
    let toothed: Vec<&Image> = pairs.iter().map(|(_, b)| &b.image).collect();
    let extractor = PerceptualExtractor::new(config.feature_seed);
    let autoencode = prepare_images(&toothed, &toothed, config, &extractor)?;
    // Phase two mixes translation pairs with toothed identity pairs. The
    // filler's output becomes its own input when a frame is processed again,
    // so the encoder must keep mapping already-toothed mouths to codes that
    // reproduce them — translation-only fine-tuning would forget that.
    let mut phase2_inputs = toothless.clone();
    phase2_inputs.extend(toothed.iter().copied());
    let mut phase2_targets = toothed.clone();
    phase2_targets.extend(toothed.iter().copied());
    let translate = prepare_images(&phase2_inputs, &phase2_targets, config, &extractor)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = TextureModel::init(config.clone(), &mut rng)?;
    let mut log = TextureTrainLog {
        recon_curve: Vec::new(),
        eval_curve: Vec::new(),
        phase1_steps: config.phase1_steps,
    };
    run_phase(
        &mut model,
        &autoencode,
        config,
        &extractor,
        &mut rng,
        config.phase1_steps,
        0,
        true,
        config.lr,
        &mut log,
    );
    // The inputs switch domain here (cavities go blank) but the pooled
    // encoder views differ only in the mouth interior, so the reduced-rate
    // fine-tune that protects the texture model's phase boundary is enough
    // to retarget the encoder as well.
    run_phase(
        &mut model,
        &translate,
        config,
        &extractor,
        &mut rng,
        config.phase2_steps,
        config.phase1_steps,
        false,
        0.2 * config.lr,
        &mut log,
    );
    model.trained = true;
    Ok((model, log))
}
