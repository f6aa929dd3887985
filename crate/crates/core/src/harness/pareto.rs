use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::{Error, Result};

/// Bounds of the confusion-loss hyperparameter search. Learning rate is
/// drawn log-uniformly, the rest uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub weight: (f64, f64),
    pub margin: (f64, f64),
    pub gamma: (f64, f64),
    pub lr: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            weight: (0.1, 10.0),
            margin: (-0.2, 0.8),
            gamma: (1.0, 40.0),
            lr: (1e-4, 1e-1),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("weight", self.weight),
            ("margin", self.margin),
            ("gamma", self.gamma),
            ("lr", self.lr),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidConfig(format!("search range {name} = ({lo}, {hi})")));
            }
        }
        if self.lr.0 <= 0.0 || self.gamma.0 <= 0.0 {
            return Err(Error::InvalidConfig("lr and gamma ranges must be positive".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TrialParams {
        let uni = |rng: &mut R, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        TrialParams {
            weight: uni(rng, self.weight),
            margin: uni(rng, self.margin),
            gamma: uni(rng, self.gamma),
            lr: uni(rng, (self.lr.0.ln(), self.lr.1.ln())).exp(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub weight: f64,
    pub margin: f64,
    pub gamma: f64,
    pub lr: f64,
}

/// One evaluated configuration. Lower person and higher non-person mAP@R
/// are better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub params: TrialParams,
    pub person_map_at_r: f64,
    pub non_person_map_at_r: f64,
}

pub fn dominates(a: &Trial, b: &Trial) -> bool {
    let no_worse = a.person_map_at_r <= b.person_map_at_r && a.non_person_map_at_r >= b.non_person_map_at_r;
    let better = a.person_map_at_r < b.person_map_at_r || a.non_person_map_at_r > b.non_person_map_at_r;
    no_worse && better
}

/// Non-dominated trials by a sort-and-sweep, returned in trial order.
/// Exact duplicates of a front point are all kept.
pub fn pareto_front(trials: &[Trial]) -> Vec<Trial> {
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&trials[a], &trials[b]);
        x.person_map_at_r
            .total_cmp(&y.person_map_at_r)
            .then(y.non_person_map_at_r.total_cmp(&x.non_person_map_at_r))
    });
    let mut keep = vec![false; trials.len()];
    let mut best = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        // Group of equal person scores, sorted best non-person first.
        let p = trials[order[i]].person_map_at_r;
        let mut j = i;
        while j < order.len() && trials[order[j]].person_map_at_r == p {
            j += 1;
        }
        let top = trials[order[i]].non_person_map_at_r;
        if top > best {
            for &k in &order[i..j] {
                if trials[k].non_person_map_at_r == top {
                    keep[k] = true;
                }
            }
            best = top;
        }
        i = j;
    }
    (0..trials.len()).filter(|&k| keep[k]).map(|k| trials[k]).collect()
}

/// Quadratic reference: every trial no other trial dominates.
pub fn pareto_front_exhaustive(trials: &[Trial]) -> Vec<Trial> {
    trials
        .iter()
        .filter(|t| !trials.iter().any(|o| dominates(o, t)))
        .copied()
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub trials: Vec<Trial>,
    pub front: Vec<Trial>,
}

impl SearchOutcome {
    /// All trials with an `on_front` column.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "trial",
            "weight",
            "margin",
            "gamma",
            "lr",
            "person_map_at_r",
            "non_person_map_at_r",
            "on_front",
        ])?;
        for t in &self.trials {
            let on_front = self.front.iter().any(|f| f.trial == t.trial);
            let p = &t.params;
            out.write_record([
                t.trial.to_string(),
                p.weight.to_string(),
                p.margin.to_string(),
                p.gamma.to_string(),
                p.lr.to_string(),
                t.person_map_at_r.to_string(),
                t.non_person_map_at_r.to_string(),
                on_front.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Random search over `space`, `objective` returning `(person, non-person)`
/// mAP@R for a sampled configuration. The front is cross-checked against
/// the exhaustive filter before it is returned.
pub fn pareto_search<F>(space: &SearchSpace, n_trials: usize, seed: u64, mut objective: F) -> Result<SearchOutcome>
where
    F: FnMut(&TrialParams) -> Result<(f64, f64)>,
{
    space.validate()?;
    if n_trials == 0 {
        return Err(Error::InvalidConfig("pareto search needs at least one trial".into()));
    }
    let mut rng = substream(seed, "search");
    let mut trials = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let params = space.sample(&mut rng);
        let (person, non_person) = objective(&params)?;
        if !(person.is_finite() && non_person.is_finite()) {
            return Err(Error::NonFinite("search objective"));
        }
        trials.push(Trial {
            trial,
            params,
            person_map_at_r: person,
            non_person_map_at_r: non_person,
        });
    }
    let front = pareto_front(&trials);
    if front != pareto_front_exhaustive(&trials) {
        return Err(Error::InvalidConfig(
            "pareto front disagrees with the exhaustive filter".into(),
        ));
    }
    Ok(SearchOutcome { trials, front })
}
