//! Editing directions in texture latent space and their application.
//!
//! A direction for emotion `y` is the difference between the mean latent
//! stack of the most intense `y`-labeled textures and the mean stack of
//! neutral textures. Directions are *not* normalized: their length encodes
//! the full-intensity displacement, so scaling by an intensity in `[0, 1]`
//! interpolates and (behind an explicit flag) values up to 2 extrapolate.
//! All set reductions use sorted accumulation, making the result invariant
//! to the order textures are supplied in, bit for bit.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::{Image, Mask};
use crate::morphable::EmotionVector;
use crate::tensorfile::TensorFile;

use super::{
    fill_invalid_texels, insert_matrix, read_matrix, LabeledTexture, LatentStack, TextureError,
    TextureModel,
};

/// Per-emotion latent displacements plus provenance of the set they were
/// measured on.
#[derive(Debug, Clone, PartialEq)]
pub struct EditingDirectionSet {
    /// `directions[y]` is the `n_layers x latent_dim` stack delta for
    /// emotion index `y`.
    pub directions: Vec<Array2<f64>>,
    /// Order-independent digest of the source textures and labels.
    pub dataset_hash: String,
    /// How many textures entered each emotion's mean.
    pub emotion_counts: Vec<usize>,
    pub neutral_count: usize,
}

impl EditingDirectionSet {
    pub fn n_emotions(&self) -> usize {
        self.directions.len()
    }
}

/// Cosine similarity between two equally-shaped stacks, treating them as
/// flat vectors.
pub fn stack_cosine(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "stack shapes differ");
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Coordinate-wise mean over stacks, summing each coordinate's values in
/// sorted order so the result does not depend on input order.
fn stable_mean(stacks: &[Array2<f64>]) -> Array2<f64> {
    let (n, d) = stacks[0].dim();
    let mut out = Array2::zeros((n, d));
    let mut vals = Vec::with_capacity(stacks.len());
    for r in 0..n {
        for c in 0..d {
            vals.clear();
            vals.extend(stacks.iter().map(|s| s[[r, c]]));
            vals.sort_by(f64::total_cmp);
            out[[r, c]] = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Order-independent digest: hash each texture + label, sort the digests,
/// hash the sorted list.
fn hash_dataset(textures: &[LabeledTexture]) -> String {
    let mut per: Vec<String> = textures
        .iter()
        .map(|t| {
            let mut h = Sha256::new();
            h.update((t.image.width() as u64).to_le_bytes());
            h.update((t.image.height() as u64).to_le_bytes());
            for &v in t.image.data() {
                h.update(v.to_le_bytes());
            }
            h.update((t.emotion.len() as u64).to_le_bytes());
            for &v in t.emotion.values() {
                h.update(v.to_le_bytes());
            }
            hex(&h.finalize())
        })
        .collect();
    per.sort();
    let mut h = Sha256::new();
    for p in &per {
        h.update(p.as_bytes());
    }
    hex(&h.finalize())
}

/// Measure one editing direction per emotion from a labeled texture set:
/// encode everything, average the top-intensity stacks of each emotion and
/// subtract the neutral average. Every emotion index must be represented
/// and the set must contain neutral textures.
pub fn compute_editing_directions(
    model: &TextureModel,
    textures: &[LabeledTexture],
) -> Result<EditingDirectionSet, TextureError> {
    if textures.is_empty() {
        return Err(TextureError::EmptyTrainingSet);
    }
    let n_e = textures[0].emotion.len();
    for t in textures {
        if t.emotion.len() != n_e {
            return Err(TextureError::DimMismatch {
                what: "emotion vector length",
                expected: n_e,
                got: t.emotion.len(),
            });
        }
    }
    let stacks: Vec<Array2<f64>> = textures
        .iter()
        .map(|t| model.encode(&t.image).map(|s| s.codes))
        .collect::<Result<_, _>>()?;

    let neutral: Vec<Array2<f64>> = textures
        .iter()
        .zip(&stacks)
        .filter(|(t, _)| t.emotion.is_neutral())
        .map(|(_, s)| s.clone())
        .collect();
    if neutral.is_empty() {
        return Err(TextureError::MissingNeutralTextures);
    }
    let neutral_mean = stable_mean(&neutral);

    let mut directions = Vec::with_capacity(n_e);
    let mut emotion_counts = Vec::with_capacity(n_e);
    for y in 0..n_e {
        let candidates: Vec<(usize, f64)> = textures
            .iter()
            .enumerate()
            .filter(|(_, t)| t.emotion.argmax() == Some(y))
            .map(|(i, t)| (i, t.emotion.values()[y]))
            .collect();
        if candidates.is_empty() {
            return Err(TextureError::MissingEmotionTextures(y));
        }
        let peak = candidates
            .iter()
            .map(|&(_, v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let top: Vec<Array2<f64>> = candidates
            .iter()
            .filter(|&&(_, v)| v >= peak - 1e-9)
            .map(|&(i, _)| stacks[i].clone())
            .collect();
        emotion_counts.push(top.len());
        directions.push(&stable_mean(&top) - &neutral_mean);
    }

    Ok(EditingDirectionSet {
        directions,
        dataset_hash: hash_dataset(textures),
        emotion_counts,
        neutral_count: neutral.len(),
    })
}

#[derive(Serialize, Deserialize)]
struct DirectionsMeta {
    format: String,
    version: u32,
    n_emotions: usize,
    n_layers: usize,
    latent_dim: usize,
    dataset_hash: String,
    emotion_counts: Vec<usize>,
    neutral_count: usize,
}

const DIRECTIONS_FORMAT: &str = "texture-directions";

pub fn save_directions(
    path: impl AsRef<std::path::Path>,
    set: &EditingDirectionSet,
) -> Result<(), TextureError> {
    let (n_layers, latent_dim) = set
        .directions
        .first()
        .map(|d| d.dim())
        .unwrap_or((0, 0));
    let meta = DirectionsMeta {
        format: DIRECTIONS_FORMAT.to_string(),
        version: 1,
        n_emotions: set.directions.len(),
        n_layers,
        latent_dim,
        dataset_hash: set.dataset_hash.clone(),
        emotion_counts: set.emotion_counts.clone(),
        neutral_count: set.neutral_count,
    };
    let mut file = TensorFile::new(serde_json::to_value(&meta).expect("serializable meta"));
    for (y, d) in set.directions.iter().enumerate() {
        insert_matrix(&mut file, &format!("dir.{y}"), d);
    }
    file.save(path)?;
    Ok(())
}

pub fn load_directions(
    path: impl AsRef<std::path::Path>,
) -> Result<EditingDirectionSet, TextureError> {
    let file = TensorFile::load(path)?;
    let meta: DirectionsMeta = serde_json::from_value(file.meta.clone())
        .map_err(|e| TextureError::BadFile(format!("bad metadata: {e}")))?;
    if meta.format != DIRECTIONS_FORMAT {
        return Err(TextureError::BadFile(format!(
            "format is {:?}, expected {DIRECTIONS_FORMAT:?}",
            meta.format
        )));
    }
    if meta.version != 1 {
        return Err(TextureError::BadFile(format!(
            "unsupported version {}",
            meta.version
        )));
    }
    let directions = (0..meta.n_emotions)
        .map(|y| read_matrix(&file, &format!("dir.{y}")))
        .collect::<Result<Vec<_>, _>>()?;
    for d in &directions {
        if d.dim() != (meta.n_layers, meta.latent_dim) {
            return Err(TextureError::BadFile(
                "direction tensor shape disagrees with metadata".into(),
            ));
        }
    }
    Ok(EditingDirectionSet {
        directions,
        dataset_hash: meta.dataset_hash,
        emotion_counts: meta.emotion_counts,
        neutral_count: meta.neutral_count,
    })
}

/// Edit a texture by moving its latent stack along the per-emotion
/// directions, scaled by the intensities in `e`, then decoding.
///
/// Contributions are summed in emotion-index order with exact skipping of
/// zero intensities, so the all-zero vector reproduces
/// `decode(encode(t0))` bit for bit and the result is independent of how a
/// caller orders simultaneous emotions. Intensities above 1 are rejected
/// unless `extrapolate` is set, which admits values up to 2 (larger values
/// clamp).
pub fn edit_texture(
    model: &TextureModel,
    set: &EditingDirectionSet,
    t0: &Image,
    e: &EmotionVector,
    extrapolate: bool,
) -> Result<Image, TextureError> {
    let mut w = model.encode(t0)?;
    shift_codes(&mut w, set, e, extrapolate)?;
    model.decode(&w)
}

/// The latent step of [`edit_texture`] on its own: adds the
/// intensity-scaled directions onto `w` in place, with the same intensity
/// rules. Split out so sequence editors can smooth shifted codes across
/// frames before decoding.
pub fn shift_codes(
    w: &mut LatentStack,
    set: &EditingDirectionSet,
    e: &EmotionVector,
    extrapolate: bool,
) -> Result<(), TextureError> {
    if e.len() != set.directions.len() {
        return Err(TextureError::DirectionCountMismatch {
            available: set.directions.len(),
            requested: e.len(),
        });
    }
    for d in &set.directions {
        if d.dim() != w.codes.dim() {
            return Err(TextureError::DimMismatch {
                what: "direction stack size",
                expected: w.codes.len(),
                got: d.len(),
            });
        }
    }
    for (dir, &v) in set.directions.iter().zip(e.values()) {
        let v = if extrapolate {
            v.clamp(0.0, 2.0)
        } else if v > 1.0 {
            return Err(TextureError::IntensityOutOfRange(v));
        } else {
            v
        };
        if v != 0.0 {
            w.codes.scaled_add(v, dir);
        }
    }
    Ok(())
}

/// [`edit_texture`] for partially observed textures: invalid texels (mask
/// below 0.5) are filled from their nearest valid neighbors before
/// encoding, and the same fill is applied to the decoded result, so
/// unobserved regions carry propagated valid content instead of decoder
/// output on both sides of the model.
pub fn edit_texture_masked(
    model: &TextureModel,
    set: &EditingDirectionSet,
    t0: &Image,
    mask: &Mask,
    e: &EmotionVector,
    extrapolate: bool,
) -> Result<Image, TextureError> {
    let filled = fill_invalid_texels(t0, mask)?;
    let edited = edit_texture(model, set, &filled, e, extrapolate)?;
    fill_invalid_texels(&edited, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::EmotionMode;
    use crate::texture_space::test_fixture;
    use crate::texture_space::{LatentStack, TextureConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> TextureModel {
        let config = TextureConfig {
            tex_size: 16,
            n_layers: 2,
            latent_dim: 4,
            channels: 4,
            enc_res: 8,
            enc_hidden: 16,
            ..TextureConfig::default()
        };
        TextureModel::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn wavy(seed: u64) -> Image {
        let mut img = Image::new(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fx, fy, ph): (f64, f64, f64) = (
            rng.gen_range(1.0..3.0),
            rng.gen_range(1.0..3.0),
            rng.gen_range(0.0..6.28),
        );
        for y in 0..16 {
            for x in 0..16 {
                let v = 0.5 + 0.2 * (fx * x as f64 / 16.0 + fy * y as f64 / 16.0 + ph).sin();
                img.set(x, y, [v, 0.9 * v, 0.8 * v]);
            }
        }
        img
    }

    fn labeled(img: Image, n_e: usize, y: Option<usize>, s: f64) -> LabeledTexture {
        let emotion = match y {
            None => EmotionVector::zeros(n_e),
            Some(y) => EmotionVector::one_hot(n_e, y, s).unwrap(),
        };
        LabeledTexture { image: img, emotion }
    }

    /// With one distinct texture per pool (duplicated so means still
    /// average), the direction is exactly the encoding difference.
    #[test]
    fn two_point_direction_is_encoding_difference() {
        let model = tiny_model(1);
        let (tn, ty) = (wavy(10), wavy(20));
        let corpus = vec![
            labeled(tn.clone(), 1, None, 0.0),
            labeled(tn.clone(), 1, None, 0.0),
            labeled(ty.clone(), 1, Some(0), 1.0),
            labeled(ty.clone(), 1, Some(0), 1.0),
        ];
        let set = compute_editing_directions(&model, &corpus).unwrap();
        let expected = &model.encode(&ty).unwrap().codes - &model.encode(&tn).unwrap().codes;
        assert_eq!(set.directions[0], expected);
        assert_eq!(set.emotion_counts, vec![2]);
        assert_eq!(set.neutral_count, 2);
    }

    #[test]
    fn only_top_intensity_textures_enter_the_mean() {
        let model = tiny_model(2);
        let corpus = vec![
            labeled(wavy(1), 1, None, 0.0),
            // A weak sample that must be ignored...
            labeled(wavy(2), 1, Some(0), 0.4),
            // ...and the top-intensity sample that defines the direction.
            labeled(wavy(3), 1, Some(0), 1.0),
        ];
        let set = compute_editing_directions(&model, &corpus).unwrap();
        let expected = &model.encode(&corpus[2].image).unwrap().codes
            - &model.encode(&corpus[0].image).unwrap().codes;
        assert_eq!(set.directions[0], expected);
        assert_eq!(set.emotion_counts, vec![1]);
    }

    #[test]
    fn directions_are_invariant_to_input_order() {
        let model = tiny_model(3);
        let mut corpus = Vec::new();
        for i in 0..3 {
            corpus.push(labeled(wavy(100 + i), 2, None, 0.0));
            corpus.push(labeled(wavy(200 + i), 2, Some(0), 1.0));
            corpus.push(labeled(wavy(300 + i), 2, Some(1), 1.0));
        }
        let a = compute_editing_directions(&model, &corpus).unwrap();
        let mut shuffled = corpus.clone();
        shuffled.reverse();
        shuffled.rotate_left(4);
        let b = compute_editing_directions(&model, &shuffled).unwrap();
        assert_eq!(a.directions, b.directions, "order must not matter, bit for bit");
        assert_eq!(a.dataset_hash, b.dataset_hash);
        assert_eq!(a.emotion_counts, b.emotion_counts);
    }

    #[test]
    fn missing_pools_are_reported() {
        let model = tiny_model(4);
        let no_neutral = vec![labeled(wavy(1), 2, Some(0), 1.0)];
        assert!(matches!(
            compute_editing_directions(&model, &no_neutral),
            Err(TextureError::MissingNeutralTextures)
        ));
        let no_second = vec![
            labeled(wavy(1), 2, None, 0.0),
            labeled(wavy(2), 2, Some(0), 1.0),
        ];
        assert!(matches!(
            compute_editing_directions(&model, &no_second),
            Err(TextureError::MissingEmotionTextures(1))
        ));
    }

    #[test]
    fn directions_file_round_trip() {
        let model = tiny_model(5);
        let corpus = vec![
            labeled(wavy(7), 2, None, 0.0),
            labeled(wavy(8), 2, Some(0), 1.0),
            labeled(wavy(9), 2, Some(1), 1.0),
        ];
        let set = compute_editing_directions(&model, &corpus).unwrap();
        let dir = std::env::temp_dir().join(format!("texdirs-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dirs.bin");
        save_directions(&path, &set).unwrap();
        let loaded = load_directions(&path).unwrap();
        assert_eq!(loaded, set);
        std::fs::remove_file(&path).ok();
    }

    /// Inject known latent offsets through the trained decoder, re-measure
    /// them through the trained encoder: recovered directions must align
    /// with the injected ones.
    #[test]
    fn recovered_directions_align_with_injected_offsets() {
        let fix = test_fixture::trained();
        let model = &fix.model;
        let neutrals: Vec<&LabeledTexture> = fix
            .corpus
            .iter()
            .filter(|t| t.emotion.is_neutral())
            .collect();
        assert!(neutrals.len() >= 3);
        let n_e = 2;

        // Injected offsets: latent displacement of one strong sample from
        // its actor's neutral, one per emotion (actor 0 occupies the first
        // 1 + n_e * 3 corpus slots; full intensity sits at offset 3 within
        // each emotion block).
        let enc = |img: &Image| model.encode(img).unwrap().codes;
        let neutral0 = enc(&fix.corpus[0].image);
        let deltas: Vec<Array2<f64>> = (0..n_e)
            .map(|y| &enc(&fix.corpus[3 * y + 3].image) - &neutral0)
            .collect();

        let mut injected = Vec::new();
        for t in &neutrals {
            let w0 = model.encode(&t.image).unwrap();
            injected.push(labeled(model.decode(&w0).unwrap(), n_e, None, 0.0));
            for (y, delta) in deltas.iter().enumerate() {
                for &s in &[1.0 / 3.0, 2.0 / 3.0, 1.0] {
                    let mut w = w0.clone();
                    w.codes.scaled_add(s, delta);
                    injected.push(labeled(model.decode(&w).unwrap(), n_e, Some(y), s));
                }
            }
        }
        let set = compute_editing_directions(model, &injected).unwrap();
        for (y, delta) in deltas.iter().enumerate() {
            let cos = stack_cosine(&set.directions[y], delta);
            assert!(cos >= 0.9, "emotion {y}: cosine {cos} below 0.9");
        }
    }

    #[test]
    fn zero_vector_edit_is_bitwise_reconstruction() {
        let model = tiny_model(6);
        let corpus = vec![
            labeled(wavy(1), 2, None, 0.0),
            labeled(wavy(2), 2, Some(0), 1.0),
            labeled(wavy(3), 2, Some(1), 1.0),
        ];
        let set = compute_editing_directions(&model, &corpus).unwrap();
        let t0 = wavy(50);
        let edited = edit_texture(&model, &set, &t0, &EmotionVector::zeros(2), false).unwrap();
        let recon = model.decode(&model.encode(&t0).unwrap()).unwrap();
        assert_eq!(edited, recon, "zero edit must equal reconstruction exactly");
    }

    #[test]
    fn latent_displacement_is_linear_in_intensity() {
        let model = tiny_model(7);
        let corpus = vec![
            labeled(wavy(1), 1, None, 0.0),
            labeled(wavy(2), 1, Some(0), 1.0),
        ];
        let set = compute_editing_directions(&model, &corpus).unwrap();
        let t0 = wavy(51);
        let w0 = model.encode(&t0).unwrap();

        let displacement = |intensity: f64| {
            let mut w = w0.clone();
            w.codes.scaled_add(intensity, &set.directions[0]);
            LatentStack {
                codes: &w.codes - &w0.codes,
            }
            .norm()
        };
        // Halving the intensity scales the applied offset by an exact power
        // of two, but measuring the displacement adds and subtracts the base
        // encoding, which costs one rounding per coordinate. The norms agree
        // to machine precision rather than bitwise.
        let full = displacement(1.0);
        let half = displacement(0.5);
        assert!(
            (full - 2.0 * half).abs() <= 1e-12 * full,
            "displacement is not linear in intensity: {full} vs {}",
            2.0 * half
        );
    }

    #[test]
    fn multi_label_edit_is_additive_over_emotions() {
        let model = tiny_model(8);
        let corpus = vec![
            labeled(wavy(1), 2, None, 0.0),
            labeled(wavy(2), 2, Some(0), 1.0),
            labeled(wavy(3), 2, Some(1), 1.0),
        ];
        let set = compute_editing_directions(&model, &corpus).unwrap();
        let t0 = wavy(52);
        let e = EmotionVector::new(vec![0.4, 0.7], EmotionMode::MultiLabel).unwrap();
        let edited = edit_texture(&model, &set, &t0, &e, false).unwrap();

        let mut w = model.encode(&t0).unwrap();
        w.codes.scaled_add(0.4, &set.directions[0]);
        w.codes.scaled_add(0.7, &set.directions[1]);
        assert_eq!(edited, model.decode(&w).unwrap());
    }

    #[test]
    fn extrapolation_needs_the_flag_and_clamps_at_two() {
        let model = tiny_model(9);
        let corpus = vec![
            labeled(wavy(1), 1, None, 0.0),
            labeled(wavy(2), 1, Some(0), 1.0),
        ];
        let set = compute_editing_directions(&model, &corpus).unwrap();
        let t0 = wavy(53);
        let hot = EmotionVector::new_checked(vec![1.5], EmotionMode::Strict, 2.0).unwrap();
        assert!(matches!(
            edit_texture(&model, &set, &t0, &hot, false),
            Err(TextureError::IntensityOutOfRange(_))
        ));
        let stretched = edit_texture(&model, &set, &t0, &hot, true).unwrap();
        let mut w = model.encode(&t0).unwrap();
        w.codes.scaled_add(1.5, &set.directions[0]);
        assert_eq!(stretched, model.decode(&w).unwrap());

        // Values beyond 2 clamp to 2 under the flag.
        let far = EmotionVector::new_checked(vec![3.0], EmotionMode::Strict, 5.0).unwrap();
        let two = EmotionVector::new_checked(vec![2.0], EmotionMode::Strict, 2.0).unwrap();
        assert_eq!(
            edit_texture(&model, &set, &t0, &far, true).unwrap(),
            edit_texture(&model, &set, &t0, &two, true).unwrap()
        );
    }

    #[test]
    fn mismatched_direction_count_is_rejected() {
        let model = tiny_model(10);
        let corpus = vec![
            labeled(wavy(1), 1, None, 0.0),
            labeled(wavy(2), 1, Some(0), 1.0),
        ];
        let set = compute_editing_directions(&model, &corpus).unwrap();
        let e = EmotionVector::zeros(3);
        assert!(matches!(
            edit_texture(&model, &set, &wavy(5), &e, false),
            Err(TextureError::DirectionCountMismatch {
                available: 1,
                requested: 3
            })
        ));
    }

    #[test]
    fn masked_edit_fills_both_sides_of_the_model() {
        let model = tiny_model(11);
        let corpus = vec![
            labeled(wavy(1), 1, None, 0.0),
            labeled(wavy(2), 1, Some(0), 1.0),
        ];
        let set = compute_editing_directions(&model, &corpus).unwrap();
        let t0 = wavy(54);
        let mut mask = Mask::new(16, 16);
        for y in 0..16 {
            for x in 0..12 {
                mask.set(x, y, 1.0);
            }
        }
        let e = EmotionVector::one_hot(1, 0, 0.8).unwrap();
        let got = edit_texture_masked(&model, &set, &t0, &mask, &e, false).unwrap();

        let filled = fill_invalid_texels(&t0, &mask).unwrap();
        let edited = edit_texture(&model, &set, &filled, &e, false).unwrap();
        let expected = fill_invalid_texels(&edited, &mask).unwrap();
        assert_eq!(got, expected);
        // Invalid texels mirror the nearest valid column of the edit.
        for y in 0..16 {
            for x in 12..16 {
                assert_eq!(got.get(x, y), edited.get(11, y));
            }
        }
    }
}
