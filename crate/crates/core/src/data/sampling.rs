use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BinaryLabel, ClassLabel, DataError, ImageRecord, Manifest, Split};

pub const DEFAULT_UNBALANCE_RATIO: f64 = 0.9;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Records of one class in path order, so results never depend on the
/// input record order.
fn class_records(m: &Manifest, label: ClassLabel) -> Vec<ImageRecord> {
    let mut v: Vec<ImageRecord> = m.of_class(label).cloned().collect();
    v.sort_by(|a, b| a.path.cmp(&b.path));
    v
}

/// Largest-remainder apportionment of `n` items over `fractions`.
///
/// Floors every quota, then hands the leftover units to the largest
/// fractional remainders. Equal remainders go to the lower index first.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // Quantized so float noise cannot reorder equal remainders.
    let rem = |i: usize| ((quotas[i] - quotas[i].floor()) * 1e9).round() as i64;
    order.sort_by(|&a, &b| rem(b).cmp(&rem(a)).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Sizes differing by at most one, larger shares first.
pub fn equal_quotas(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

fn check_fractions(fractions: &[f64]) -> Result<(), DataError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions.to_vec()));
    }
    Ok(())
}

/// Stratified per-class partition of `m` into `fractions.len()` parts.
fn stratified_partition(
    m: &Manifest,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<ImageRecord>>, DataError> {
    check_fractions(fractions)?;
    let mut rng = rng(seed);
    let mut parts = vec![Vec::new(); fractions.len()];
    for label in ClassLabel::ALL {
        let mut recs = class_records(m, label);
        if recs.is_empty() {
            continue;
        }
        if recs.len() < fractions.len() {
            return Err(DataError::TooFewRecords {
                class: label,
                count: recs.len(),
                min: fractions.len(),
            });
        }
        recs.shuffle(&mut rng);
        let counts = apportion(recs.len(), fractions);
        let mut it = recs.into_iter();
        for (part, &k) in parts.iter_mut().zip(&counts) {
            part.extend(it.by_ref().take(k));
        }
    }
    Ok(parts)
}

/// Stratified three-way partition; the outputs are tagged
/// `BaseTrain`, `HeadTrain` and `Test` respectively.
pub fn split_three_way(
    m: &Manifest,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[Manifest; 3], DataError> {
    let parts = stratified_partition(m, &fractions, seed)?;
    let splits = [Split::BaseTrain, Split::HeadTrain, Split::Test];
    let mut out = Vec::with_capacity(3);
    for (mut recs, split) in parts.into_iter().zip(splits) {
        recs.iter_mut().for_each(|r| r.split = split);
        out.push(Manifest::sorted(
            recs,
            seed,
            format!(
                "split_three_way {fractions:?} part {split:?} of [{}]",
                m.provenance
            ),
        )?);
    }
    Ok(out.try_into().expect("three parts"))
}

/// Stratified (train, validation) carve; split tags are left unchanged.
pub fn carve_validation(
    m: &Manifest,
    val_fraction: f64,
    seed: u64,
) -> Result<(Manifest, Manifest), DataError> {
    let parts = stratified_partition(m, &[1.0 - val_fraction, val_fraction], seed)?;
    let mut it = parts.into_iter();
    let train = it.next().expect("two parts");
    let val = it.next().expect("two parts");
    Ok((
        Manifest::sorted(
            train,
            seed,
            format!("carve_validation train of [{}]", m.provenance),
        )?,
        Manifest::sorted(
            val,
            seed,
            format!("carve_validation val {val_fraction} of [{}]", m.provenance),
        )?,
    ))
}

/// Every record of `predominant` plus `round(P·(1−ratio)/ratio)` "others"
/// drawn half-and-half from the two remaining classes.
pub fn make_unbalanced_subset(
    m: &Manifest,
    predominant: ClassLabel,
    ratio: f64,
    seed: u64,
) -> Result<Manifest, DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::BadRatio(ratio));
    }
    m.require_all_classes()?;
    let main = class_records(m, predominant);
    let p = main.len();
    let needed = (p as f64 * (1.0 - ratio) / ratio).round() as usize;
    let others = predominant.others();
    let halves = equal_quotas(needed, 2);
    let pools: Vec<Vec<ImageRecord>> = others.iter().map(|&c| class_records(m, c)).collect();
    let available = [pools[0].len(), pools[1].len()];
    if available[0] < halves[0] || available[1] < halves[1] {
        return Err(DataError::InsufficientOthers {
            needed,
            per_class: [halves[0], halves[1]],
            available,
        });
    }
    let mut rng = rng(seed);
    let mut records = main;
    for (mut pool, k) in pools.into_iter().zip(halves) {
        pool.shuffle(&mut rng);
        pool.truncate(k);
        records.extend(pool);
    }
    for r in &mut records {
        r.binary = Some(BinaryLabel::against(r.label, predominant));
    }
    Manifest::sorted(
        records,
        seed,
        format!(
            "unbalanced subset predominant={predominant} ratio={ratio} others={needed} \
             (others may be reused across subsets) of [{}]",
            m.provenance
        ),
    )
}

/// Subsamples every class down to the smallest class count.
pub fn balance_eval_set(m: &Manifest, seed: u64) -> Result<Manifest, DataError> {
    m.require_all_classes()?;
    let counts = m.class_counts();
    let target = *counts.iter().min().expect("three classes");
    let mut rng = rng(seed);
    let mut records = Vec::with_capacity(3 * target);
    for label in ClassLabel::ALL {
        let mut recs = class_records(m, label);
        recs.shuffle(&mut rng);
        recs.truncate(target);
        records.extend(recs);
    }
    Manifest::sorted(
        records,
        seed,
        format!("balanced {target} per class of [{}]", m.provenance),
    )
}

/// Recipe for one generalization benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenBenchSpec {
    pub name: String,
    pub fake_generators: Vec<String>,
    pub fakes_total: usize,
    pub real_sources: Vec<String>,
    pub reals_total: usize,
    pub seed: u64,
}

impl GenBenchSpec {
    pub fn fake_quotas(&self) -> Vec<usize> {
        equal_quotas(self.fakes_total, self.fake_generators.len())
    }

    pub fn real_quotas(&self) -> Vec<usize> {
        equal_quotas(self.reals_total, self.real_sources.len())
    }
}

/// Draws equal per-tag quotas of fakes and reals from `pool`.
pub fn assemble_generalization_set(
    pool: &Manifest,
    spec: &GenBenchSpec,
) -> Result<Manifest, DataError> {
    if spec.fakes_total > 0 && spec.fake_generators.is_empty() {
        return Err(DataError::BadSpec(format!(
            "{}: fakes requested without generators",
            spec.name
        )));
    }
    if spec.reals_total > 0 && spec.real_sources.is_empty() {
        return Err(DataError::BadSpec(format!(
            "{}: reals requested without sources",
            spec.name
        )));
    }
    let mut sorted: Vec<&ImageRecord> = pool.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    let mut rng = rng(spec.seed);
    let mut records = Vec::with_capacity(spec.fakes_total + spec.reals_total);
    let groups = spec
        .fake_generators
        .iter()
        .zip(spec.fake_quotas())
        .map(|(t, q)| (t, q, true))
        .chain(
            spec.real_sources
                .iter()
                .zip(spec.real_quotas())
                .map(|(t, q)| (t, q, false)),
        );
    for (tag, quota, fake) in groups {
        let mut candidates: Vec<ImageRecord> = sorted
            .iter()
            .filter(|r| r.label.is_fake() == fake && &r.generator == tag)
            .map(|r| (*r).clone())
            .collect();
        if candidates.len() < quota {
            return Err(DataError::InsufficientPool {
                tag: tag.clone(),
                needed: quota,
                available: candidates.len(),
            });
        }
        candidates.shuffle(&mut rng);
        candidates.truncate(quota);
        records.extend(candidates);
    }
    Manifest::sorted(
        records,
        spec.seed,
        format!("genbench {} of [{}]", spec.name, pool.provenance),
    )
}
