use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cubeio::Dataset;
use crate::error::{Error, Result};

/// One N-way sampling unit over a dataset.
///
/// `classes[j]` is the registry index of episode class `j`; `support[j]` and
/// `query[j]` hold item indices into the dataset the episode was drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub id: usize,
    pub classes: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    pub fn shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    /// Support item indices, class-major.
    pub fn support_items(&self) -> impl Iterator<Item = usize> + '_ {
        self.support.iter().flatten().copied()
    }

    /// Query item indices with their episode-local class position.
    pub fn query_items(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.query
            .iter()
            .enumerate()
            .flat_map(|(j, items)| items.iter().map(move |&i| (i, j)))
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.shot();
        let q = self.query.first().map_or(0, Vec::len);
        if self.support.len() != self.way() || self.query.len() != self.way() {
            return Err(Error::arg("episode class lists have inconsistent lengths"));
        }
        if self.support.iter().any(|s| s.len() != k) || self.query.iter().any(|s| s.len() != q) {
            return Err(Error::arg("episode classes contribute unequal counts"));
        }
        let mut seen: Vec<usize> = self
            .support_items()
            .chain(self.query_items().map(|(i, _)| i))
            .collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Protocol(format!(
                "episode {} reuses an item across support and query",
                self.id
            )));
        }
        Ok(())
    }
}

/// Partitions each class of `dataset` into episodes of `shot` support plus
/// `query` query items, without replacement.
///
/// Every class present in the dataset takes part in every episode, so `way`
/// must equal the number of non-empty classes. The episode count is the
/// per-class cardinality divided by `shot + query`.
pub fn sample_episodes(
    dataset: &Dataset,
    way: usize,
    shot: usize,
    query: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if shot == 0 || query == 0 {
        return Err(Error::arg("shot and query sizes must be at least 1"));
    }
    let groups = dataset.indices_by_class();
    let present: Vec<usize> = (0..groups.len())
        .filter(|&k| !groups[k].is_empty())
        .collect();
    if present.len() != way {
        return Err(Error::arg(format!(
            "{way}-way episodes requested but the dataset holds {} classes",
            present.len()
        )));
    }
    let unit = shot + query;
    let n = groups[present[0]].len();
    for &k in &present {
        let m = groups[k].len();
        if m != n {
            return Err(Error::arg(format!(
                "class `{}` has {m} items while `{}` has {n}; episodes need balanced classes",
                dataset.classes[k], dataset.classes[present[0]]
            )));
        }
        if !m.is_multiple_of(unit) {
            let lower = m / unit * unit;
            return Err(Error::arg(format!(
                "class `{}` has {m} items, not a multiple of shot+query={unit}; \
                 nearest valid counts are {} and {}",
                dataset.classes[k],
                lower,
                lower + unit
            )));
        }
    }

    let count = n / unit;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shuffled: Vec<Vec<usize>> = present
        .iter()
        .map(|&k| {
            let mut g = groups[k].clone();
            g.shuffle(&mut rng);
            g
        })
        .collect();
    Ok((0..count)
        .map(|e| Episode {
            id: e,
            classes: present.clone(),
            support: shuffled
                .iter()
                .map(|g| g[e * unit..e * unit + shot].to_vec())
                .collect(),
            query: shuffled
                .iter()
                .map(|g| g[e * unit + shot..(e + 1) * unit].to_vec())
                .collect(),
        })
        .collect())
}
