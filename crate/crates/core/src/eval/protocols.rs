use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{mean_std, Confusion, EvalReport, Protocol, VariabilityReport};
use crate::cubeio::{Dataset, HyperCube};
use crate::embed::{embed_batch, EmbeddingParams};
use crate::error::{Error, Result};
use crate::fewshot::{
    classify, compute_prototypes, episode_prototypes, CCPBank, Episode, PrototypeBank,
};
use crate::matrix::Matrix;

fn embed_items(data: &Dataset, items: &[usize], params: &EmbeddingParams) -> Result<Matrix> {
    let cubes: Vec<&HyperCube> = items.iter().map(|&i| &data.items[i].cube).collect();
    embed_batch(&cubes, params, params.config.attention)
}

fn present_classes(data: &Dataset) -> Vec<usize> {
    data.indices_by_class()
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(k, _)| k)
        .collect()
}

fn tally(
    registry: &[String],
    truth_classes: Vec<usize>,
    candidates: Vec<usize>,
    truth: &[usize],
    predicted: &[usize],
) -> Result<Confusion> {
    let mut confusion = Confusion::new(registry.to_vec(), truth_classes, candidates);
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion.record(t, p)?;
    }
    Ok(confusion)
}

/// Classifies every test cube against the collective prototypes.
pub fn eval_complete(
    test: &Dataset,
    params: &EmbeddingParams,
    bank: &CCPBank,
) -> Result<EvalReport> {
    let start = Instant::now();
    bank.validate()?;
    let digest = params.digest();
    if bank.provenance.config_digest != digest {
        return Err(Error::Compatibility(format!(
            "prototype bank was built for model {}, parameters are {digest}",
            bank.provenance.config_digest
        )));
    }
    if bank.registry != test.classes {
        return Err(Error::Protocol(
            "prototype bank and test data use different class registries".into(),
        ));
    }
    let classes = present_classes(test);
    if let Some(&k) = classes.iter().find(|&&k| !bank.contains_class(k)) {
        return Err(Error::Protocol(format!(
            "test class `{}` has no collective prototype",
            test.classes[k]
        )));
    }
    let items: Vec<usize> = (0..test.len()).collect();
    let emb = embed_items(test, &items, params)?;
    let predicted = classify(&emb, bank)?;
    let truth: Vec<usize> = test.items.iter().map(|c| c.label_index).collect();
    let confusion = tally(
        &test.classes,
        classes,
        bank.class_ids.clone(),
        &truth,
        &predicted,
    )?;
    let mut report = EvalReport::from_confusion(Protocol::Complete, 0, digest, confusion);
    report.elapsed_ms = start.elapsed().as_millis();
    Ok(report)
}

/// Accuracy of the test set under each episode's own prototypes, next to the
/// collective-prototype accuracy. `episodes` index into `train`.
pub fn eval_with_support_sets(
    test: &Dataset,
    train: &Dataset,
    params: &EmbeddingParams,
    episodes: &[Episode],
    bank: &CCPBank,
) -> Result<VariabilityReport> {
    if episodes.is_empty() {
        return Err(Error::arg("no support sets given"));
    }
    if train.classes != test.classes {
        return Err(Error::arg(
            "training and test data use different class registries",
        ));
    }
    let ccp = eval_complete(test, params, bank)?;
    let items: Vec<usize> = (0..test.len()).collect();
    let emb = embed_items(test, &items, params)?;
    let truth: Vec<usize> = test.items.iter().map(|c| c.label_index).collect();
    let mut per_set = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let protos = episode_prototypes(train, ep, params, params.config.attention)?;
        if let Some(k) = truth.iter().find(|k| !protos.classes.contains(k)) {
            return Err(Error::Protocol(format!(
                "support set {} lacks test class `{}`",
                ep.id, test.classes[*k]
            )));
        }
        let predicted = classify(&emb, &protos)?;
        let correct = predicted.iter().zip(&truth).filter(|(p, t)| p == t).count();
        per_set.push(correct as f64 / truth.len().max(1) as f64);
    }
    let (mean, std) = mean_std(&per_set);
    Ok(VariabilityReport {
        per_set,
        mean,
        std,
        ccp_accuracy: ccp.accuracy,
    })
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws `shot` support cubes per class from `pool`.
///
/// Each class is shuffled by its own stream derived from `seed` and the class
/// index, so two draws with the same seed agree on every shared class.
/// The returned episode has no queries.
pub fn draw_support(pool: &Dataset, classes: &[usize], shot: usize, seed: u64) -> Result<Episode> {
    if shot == 0 {
        return Err(Error::arg("support shot must be positive"));
    }
    let groups = pool.indices_by_class();
    let mut support = Vec::with_capacity(classes.len());
    for &k in classes {
        let mut members = groups
            .get(k)
            .cloned()
            .ok_or_else(|| Error::arg(format!("class index {k} is outside the registry")))?;
        if members.len() < shot {
            return Err(Error::arg(format!(
                "support pool for class `{}` has {} cubes, {shot} needed",
                pool.classes[k],
                members.len()
            )));
        }
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, k as u64)));
        members.truncate(shot);
        members.sort_unstable();
        support.push(members);
    }
    Ok(Episode {
        id: 0,
        classes: classes.to_vec(),
        support,
        query: vec![Vec::new(); classes.len()],
    })
}

struct PartialInputs<'a> {
    test: &'a Dataset,
    pool: &'a Dataset,
    excluded: &'a [usize],
    support: &'a Episode,
    candidates: &'a [usize],
}

impl PartialInputs<'_> {
    fn check(&self) -> Result<Vec<usize>> {
        if self.test.classes != self.pool.classes {
            return Err(Error::arg(
                "support pool and test data use different class registries",
            ));
        }
        if self.excluded.is_empty() {
            return Err(Error::arg("no excluded classes given"));
        }
        for &k in self.excluded {
            if !self.candidates.contains(&k) {
                return Err(Error::Protocol(format!(
                    "excluded class `{}` is not a candidate",
                    self.test.classes[k]
                )));
            }
        }
        for &k in self.candidates {
            if !self.support.classes.contains(&k) {
                return Err(Error::Protocol(format!(
                    "candidate class `{}` has no support cubes",
                    self.test.classes[k]
                )));
            }
        }
        let queries: Vec<usize> = self
            .test
            .items
            .iter()
            .enumerate()
            .filter(|(_, c)| self.excluded.contains(&c.label_index))
            .map(|(i, _)| i)
            .collect();
        if queries.is_empty() {
            return Err(Error::Protocol(
                "test data has no cubes of the excluded classes".into(),
            ));
        }
        let query_ids: BTreeSet<&str> = queries
            .iter()
            .map(|&i| self.test.items[i].id.as_str())
            .collect();
        for i in self.support.support_items() {
            let id = &self.pool.items[i].id;
            if query_ids.contains(id.as_str()) {
                return Err(Error::Protocol(format!(
                    "cube `{id}` is both support and query"
                )));
            }
        }
        Ok(queries)
    }

    fn candidate_groups(&self) -> Vec<&[usize]> {
        self.candidates
            .iter()
            .map(|k| {
                let pos = self
                    .support
                    .classes
                    .iter()
                    .position(|c| c == k)
                    .expect("checked");
                self.support.support[pos].as_slice()
            })
            .collect()
    }
}

/// Embedding lookup shared by the partial-class evaluations.
trait Embedder {
    fn pool_rows(&self, items: &[usize]) -> Result<Matrix>;
    fn test_rows(&self, items: &[usize]) -> Result<Matrix>;
}

struct Direct<'a> {
    test: &'a Dataset,
    pool: &'a Dataset,
    params: &'a EmbeddingParams,
}

impl Embedder for Direct<'_> {
    fn pool_rows(&self, items: &[usize]) -> Result<Matrix> {
        embed_items(self.pool, items, self.params)
    }

    fn test_rows(&self, items: &[usize]) -> Result<Matrix> {
        embed_items(self.test, items, self.params)
    }
}

struct Cached {
    pool: Matrix,
    test: Matrix,
}

impl Embedder for Cached {
    fn pool_rows(&self, items: &[usize]) -> Result<Matrix> {
        Ok(self.pool.select_rows(items))
    }

    fn test_rows(&self, items: &[usize]) -> Result<Matrix> {
        Ok(self.test.select_rows(items))
    }
}

fn run_partial(
    inputs: &PartialInputs<'_>,
    embedder: &impl Embedder,
    protocol: Protocol,
    digest: String,
) -> Result<EvalReport> {
    let start = Instant::now();
    let queries = inputs.check()?;
    let support: Vec<Matrix> = inputs
        .candidate_groups()
        .into_iter()
        .map(|items| embedder.pool_rows(items))
        .collect::<Result<_>>()?;
    let protos = compute_prototypes(&support, inputs.candidates)?;
    let emb = embedder.test_rows(&queries)?;
    let predicted = classify(&emb, &protos)?;
    let truth: Vec<usize> = queries
        .iter()
        .map(|&i| inputs.test.items[i].label_index)
        .collect();
    let confusion = tally(
        &inputs.test.classes,
        inputs.excluded.to_vec(),
        protos.class_ids().to_vec(),
        &truth,
        &predicted,
    )?;
    let mut report = EvalReport::from_confusion(protocol, 0, digest, confusion);
    report.elapsed_ms = start.elapsed().as_millis();
    Ok(report)
}

fn same_set(a: &[usize], b: &[usize]) -> bool {
    a.iter().collect::<BTreeSet<_>>() == b.iter().collect::<BTreeSet<_>>()
}

/// Excluded-class queries classified among the excluded classes only.
///
/// `support` draws from `pool` and must cover exactly the excluded classes.
pub fn eval_partial_strategy1(
    test: &Dataset,
    pool: &Dataset,
    params: &EmbeddingParams,
    excluded: &[usize],
    support: &Episode,
) -> Result<EvalReport> {
    if !same_set(&support.classes, excluded) {
        return Err(Error::Protocol(
            "strategy 1 support must cover exactly the excluded classes".into(),
        ));
    }
    let inputs = PartialInputs {
        test,
        pool,
        excluded,
        support,
        candidates: &support.classes,
    };
    run_partial(
        &inputs,
        &Direct { test, pool, params },
        Protocol::PartialStrategy1,
        params.digest(),
    )
}

/// Excluded-class queries classified among every registered class, with all
/// prototypes taken from `support`.
pub fn eval_partial_strategy2(
    test: &Dataset,
    pool: &Dataset,
    params: &EmbeddingParams,
    excluded: &[usize],
    support: &Episode,
) -> Result<EvalReport> {
    let all: Vec<usize> = (0..test.classes.len()).collect();
    if !same_set(&support.classes, &all) {
        return Err(Error::Protocol(
            "strategy 2 support must cover every registered class".into(),
        ));
    }
    let inputs = PartialInputs {
        test,
        pool,
        excluded,
        support,
        candidates: &support.classes,
    };
    run_partial(
        &inputs,
        &Direct { test, pool, params },
        Protocol::PartialStrategy2,
        params.digest(),
    )
}

/// Partial-class evaluation against an explicit candidate subset of `support`.
pub fn eval_partial_restricted(
    test: &Dataset,
    pool: &Dataset,
    params: &EmbeddingParams,
    excluded: &[usize],
    support: &Episode,
    candidates: &[usize],
) -> Result<EvalReport> {
    let inputs = PartialInputs {
        test,
        pool,
        excluded,
        support,
        candidates,
    };
    run_partial(
        &inputs,
        &Direct { test, pool, params },
        Protocol::PartialRestricted,
        params.digest(),
    )
}

/// Both partial-class strategies over repeated paired support draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialStudy {
    pub excluded: Vec<String>,
    pub shot: usize,
    pub seed: u64,
    pub strategy1: Vec<f64>,
    pub strategy2: Vec<f64>,
    pub strategy1_mean: f64,
    pub strategy1_std: f64,
    pub strategy2_mean: f64,
    pub strategy2_std: f64,
    /// Summed over all draws.
    pub strategy1_confusion: Confusion,
    pub strategy2_confusion: Confusion,
    /// Per candidate class: share of excluded-class queries wrongly assigned
    /// to it under strategy 2, pooled over draws.
    pub misclassification: Vec<(String, f64)>,
}

/// Runs `repetitions` paired draws. Draw `r` uses one seed for both
/// strategies, so the excluded-class support cubes are identical and only the
/// candidate set differs.
pub fn partial_class_study(
    test: &Dataset,
    pool: &Dataset,
    params: &EmbeddingParams,
    excluded: &[usize],
    shot: usize,
    repetitions: usize,
    seed: u64,
) -> Result<PartialStudy> {
    if repetitions == 0 {
        return Err(Error::arg("at least one repetition is required"));
    }
    let all: Vec<usize> = (0..test.classes.len()).collect();
    let digest = params.digest();
    let cache = Cached {
        pool: embed_items(pool, &(0..pool.len()).collect::<Vec<_>>(), params)?,
        test: embed_items(test, &(0..test.len()).collect::<Vec<_>>(), params)?,
    };
    let mut s1 = Vec::with_capacity(repetitions);
    let mut s2 = Vec::with_capacity(repetitions);
    let mut c1: Option<Confusion> = None;
    let mut c2: Option<Confusion> = None;
    for r in 0..repetitions {
        let draw_seed = mix(seed, r as u64);
        let mut sup1 = draw_support(pool, excluded, shot, draw_seed)?;
        let mut sup2 = draw_support(pool, &all, shot, draw_seed)?;
        sup1.id = r;
        sup2.id = r;
        let one = PartialInputs {
            test,
            pool,
            excluded,
            support: &sup1,
            candidates: &sup1.classes,
        };
        let two = PartialInputs {
            test,
            pool,
            excluded,
            support: &sup2,
            candidates: &sup2.classes,
        };
        let r1 = run_partial(&one, &cache, Protocol::PartialStrategy1, digest.clone())?;
        let r2 = run_partial(&two, &cache, Protocol::PartialStrategy2, digest.clone())?;
        s1.push(r1.accuracy);
        s2.push(r2.accuracy);
        match &mut c1 {
            Some(c) => c.merge(&r1.confusion)?,
            None => c1 = Some(r1.confusion),
        }
        match &mut c2 {
            Some(c) => c.merge(&r2.confusion)?,
            None => c2 = Some(r2.confusion),
        }
    }
    let (m1, d1) = mean_std(&s1);
    let (m2, d2) = mean_std(&s2);
    let c2 = c2.expect("at least one repetition");
    Ok(PartialStudy {
        excluded: excluded.iter().map(|&k| test.classes[k].clone()).collect(),
        shot,
        seed,
        strategy1: s1,
        strategy2: s2,
        strategy1_mean: m1,
        strategy1_std: d1,
        strategy2_mean: m2,
        strategy2_std: d2,
        strategy1_confusion: c1.expect("at least one repetition"),
        misclassification: c2.misclassification_rates(),
        strategy2_confusion: c2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubeio::split_dataset;
    use crate::embed::ModelConfig;
    use crate::fewshot::{CcpProvenance, CCP_FORMAT_VERSION};
    use crate::synth::{generate, SynthConfig};

    fn small() -> (Dataset, Dataset, EmbeddingParams) {
        let cfg = SynthConfig {
            num_classes: 4,
            cubes_per_class: 12,
            height: 8,
            width: 8,
            channels: 8,
            noise_sigma: 0.0,
            per_class_train: 8,
            ..SynthConfig::default()
        };
        let (_, cubes) = generate(&cfg).unwrap();
        let classes = cfg.class_names();
        let (tr, te) = split_dataset(cubes, &classes, 8, 1).unwrap();
        let model = ModelConfig {
            in_channels: 8,
            reduction_ratio: 4,
            stage_widths: vec![4],
            blocks_per_stage: 1,
            embedding_dim: 8,
            ..ModelConfig::default()
        };
        let params = EmbeddingParams::init(&model).unwrap();
        (
            Dataset {
                classes: classes.clone(),
                items: tr,
            },
            Dataset { classes, items: te },
            params,
        )
    }

    fn centroid_bank(data: &Dataset, params: &EmbeddingParams) -> CCPBank {
        let groups = data.indices_by_class();
        let support: Vec<Matrix> = groups
            .iter()
            .map(|g| embed_items(data, g, params).unwrap())
            .collect();
        let classes: Vec<usize> = (0..groups.len()).collect();
        let set = compute_prototypes(&support, &classes).unwrap();
        CCPBank {
            format_version: CCP_FORMAT_VERSION,
            registry: data.classes.clone(),
            class_ids: classes,
            dim: params.embedding_dim(),
            vectors: set.vectors,
            provenance: CcpProvenance {
                best_epoch: 1,
                episodes: 1,
                config_digest: params.digest(),
            },
        }
    }

    #[test]
    fn true_centroids_of_noiseless_test_set_are_perfect() {
        let (_, test, params) = small();
        let bank = centroid_bank(&test, &params);
        let report = eval_complete(&test, &params, &bank).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.confusion.total(), test.len() as u64);
        for (i, row) in report.confusion.counts.iter().enumerate() {
            assert_eq!(row.iter().sum::<u64>(), report.per_class[i].count);
        }
    }

    #[test]
    fn missing_class_and_digest_mismatch() {
        let (_, test, params) = small();
        let mut bank = centroid_bank(&test, &params);
        bank.provenance.config_digest = "0000000000000000".into();
        assert!(matches!(
            eval_complete(&test, &params, &bank),
            Err(Error::Compatibility(_))
        ));
        let mut bank = centroid_bank(&test, &params);
        bank.class_ids.pop();
        bank.vectors = bank.vectors.select_rows(&[0, 1, 2]);
        assert!(matches!(
            eval_complete(&test, &params, &bank),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn identical_support_sets_have_zero_spread() {
        let (train, test, params) = small();
        let bank = centroid_bank(&test, &params);
        let ep = draw_support(&train, &[0, 1, 2, 3], 3, 5).unwrap();
        let eps = vec![ep.clone(), ep.clone(), ep];
        let v = eval_with_support_sets(&test, &train, &params, &eps, &bank).unwrap();
        assert_eq!(v.per_set.len(), 3);
        assert_eq!(v.std, 0.0);
        assert_eq!(v.mean, v.per_set[0]);
    }

    #[test]
    fn paired_draws_share_excluded_support() {
        let (train, ..) = small();
        let a = draw_support(&train, &[1, 3], 3, 9).unwrap();
        let b = draw_support(&train, &[0, 1, 2, 3], 3, 9).unwrap();
        assert_eq!(a.support[0], b.support[1]);
        assert_eq!(a.support[1], b.support[3]);
        assert!(draw_support(&train, &[0], 9, 0).is_err());
    }

    #[test]
    fn restricted_strategy2_equals_strategy1() {
        let (train, test, params) = small();
        let excluded = [2, 3];
        let sup2 = draw_support(&train, &[0, 1, 2, 3], 3, 4).unwrap();
        let sup1 = draw_support(&train, &excluded, 3, 4).unwrap();
        let r1 = eval_partial_strategy1(&test, &train, &params, &excluded, &sup1).unwrap();
        let rr =
            eval_partial_restricted(&test, &train, &params, &excluded, &sup2, &excluded).unwrap();
        assert_eq!(r1.confusion, rr.confusion);
        assert_eq!(r1.accuracy, rr.accuracy);
        assert_eq!(r1.per_class, rr.per_class);
        let r2 = eval_partial_strategy2(&test, &train, &params, &excluded, &sup2).unwrap();
        assert!(r2.accuracy <= r1.accuracy);
        assert_eq!(r2.confusion.total(), r1.confusion.total());
    }

    #[test]
    fn support_query_overlap_is_rejected() {
        let (_, test, params) = small();
        let sup = draw_support(&test, &[2, 3], 1, 0).unwrap();
        let err = eval_partial_strategy1(&test, &test, &params, &[2, 3], &sup).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn strategy_supports_are_checked() {
        let (train, test, params) = small();
        let sup = draw_support(&train, &[1, 2, 3], 2, 0).unwrap();
        assert!(eval_partial_strategy1(&test, &train, &params, &[2, 3], &sup).is_err());
        assert!(eval_partial_strategy2(&test, &train, &params, &[2, 3], &sup).is_err());
    }

    #[test]
    fn study_is_paired_and_consistent() {
        let (train, test, params) = small();
        let study = partial_class_study(&test, &train, &params, &[0, 3], 2, 4, 11).unwrap();
        assert_eq!(study.strategy1.len(), 4);
        for (a, b) in study.strategy1.iter().zip(&study.strategy2) {
            assert!(b <= a);
        }
        let (m, s) = mean_std(&study.strategy1);
        assert!((m - study.strategy1_mean).abs() < 1e-9 && (s - study.strategy1_std).abs() < 1e-9);
        assert_eq!(study.strategy2_confusion.total(), 4 * 8);
        let sup = draw_support(&train, &[0, 3], 2, mix(11, 2)).unwrap();
        let r = eval_partial_strategy1(&test, &train, &params, &[0, 3], &sup).unwrap();
        assert_eq!(r.accuracy, study.strategy1[2]);
    }
}
