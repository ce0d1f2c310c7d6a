use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::util::rng_for;

use super::{check_same_languages, ParallelCorpus};

/// Combines bitext with synthetic data at `ratio` synthetic pairs per bitext pair.
///
/// The synthetic side is resampled to `round(|bitext| * ratio)` pairs. When
/// that exceeds the synthetic pool, every synthetic pair is repeated
/// `floor(target / |pool|)` times and the remainder is drawn without
/// replacement, so each pair appears either ⌊k⌋ or ⌈k⌉ times. The result is
/// shuffled deterministically by `seed`.
pub fn mix(
    bitext: &ParallelCorpus,
    synthetic: &ParallelCorpus,
    ratio: f64,
    seed: u64,
) -> Result<ParallelCorpus> {
    if bitext.is_empty() {
        return Err(Error::Data("cannot mix into an empty bitext".into()));
    }
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::Config(format!("mixing ratio must be non-negative, got {ratio}")));
    }
    check_same_languages(bitext, synthetic)?;

    let wanted = (bitext.len() as f64 * ratio).round() as usize;
    if wanted > 0 && synthetic.is_empty() {
        return Err(Error::Data("synthetic corpus is empty but ratio > 0".into()));
    }

    let mut rng = rng_for(seed, 0x6d69_78);
    let mut chosen: Vec<usize> = Vec::with_capacity(wanted);
    if wanted > 0 {
        let pool = synthetic.len();
        for _ in 0..wanted / pool {
            chosen.extend(0..pool);
        }
        let mut rest: Vec<usize> = (0..pool).collect();
        rest.shuffle(&mut rng);
        chosen.extend(rest.into_iter().take(wanted % pool));
    }

    let mut out = bitext.clone();
    out.pairs
        .extend(chosen.into_iter().map(|i| synthetic.pairs[i].clone()));
    out.pairs.shuffle(&mut rng);
    Ok(out)
}
