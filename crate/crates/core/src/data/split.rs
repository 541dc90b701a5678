use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, Magnification, Manifest, Split};
use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// `(train, val, test)`, non-negative and summing to 1.
    pub fractions: (f64, f64, f64),
    /// Keep every image of a patient in one split.
    pub by_patient: bool,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: (0.7, 0.15, 0.15),
            by_patient: true,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let f = [self.fractions.0, self.fractions.1, self.fractions.2];
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return config_err(format!(
                "split fractions must be non-negative and sum to 1, got {f:?}"
            ));
        }
        Ok(())
    }
}

type Stratum = (Label, Magnification);

/// Assigns every record a split, stratified by `(label, magnification)`.
///
/// Groups (patients, or single records) are visited in a seeded order and
/// each goes to the open split with the largest summed deficit
/// `f_s·(k + 1) − c_s` over the records it contains, where `k` counts the
/// stratum's records already placed and `c_s` those placed in split `s`.
/// Splits with fraction 0 stay empty.
pub fn split_stratified(m: &Manifest, cfg: &SplitConfig) -> Result<Manifest> {
    cfg.validate()?;
    let fractions = [cfg.fractions.0, cfg.fractions.1, cfg.fractions.2];
    let open: Vec<usize> = (0..3).filter(|&s| fractions[s] > 0.0).collect();

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        let key = if cfg.by_patient {
            format!("{}\u{0}{}", r.label, r.patient_id)
        } else {
            r.path.clone()
        };
        groups.entry(key).or_default().push(i);
    }
    let mut order: Vec<Vec<usize>> = groups.into_values().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let mut placed: BTreeMap<Stratum, (usize, [usize; 3])> = BTreeMap::new();
    let mut out = m.clone();
    for group in order {
        let mut best = (f64::NEG_INFINITY, open[0]);
        for &s in &open {
            let mut local: BTreeMap<Stratum, usize> = BTreeMap::new();
            let mut score = 0.0;
            for &i in &group {
                let r = &m.records[i];
                let key = (r.label, r.magnification);
                let extra = local.entry(key).or_default();
                let (k, c) = placed.get(&key).copied().unwrap_or((0, [0; 3]));
                score += fractions[s] * (k + *extra + 1) as f64 - (c[s] + *extra) as f64;
                *extra += 1;
            }
            if score > best.0 {
                best = (score, s);
            }
        }
        let s = best.1;
        for &i in &group {
            let r = &mut out.records[i];
            let e = placed.entry((r.label, r.magnification)).or_default();
            e.0 += 1;
            e.1[s] += 1;
            r.split = Some(Split::ALL[s]);
        }
    }

    for ((label, mag), (n, counts)) in &placed {
        let empty: Vec<&str> = open
            .iter()
            .filter(|&&s| counts[s] == 0)
            .map(|&s| Split::ALL[s].as_str())
            .collect();
        if !empty.is_empty() {
            return Err(Error::Split(format!(
                "stratum {label}/{mag} has {n} record(s) and leaves split(s) {} empty",
                empty.join(", ")
            )));
        }
    }
    Ok(out)
}
