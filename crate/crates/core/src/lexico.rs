//! Stress-aware lexicographic node selection.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agent::ActionScores;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StressRegime {
    Low,
    Medium,
    High,
    Extreme,
}

impl StressRegime {
    pub const ALL: [StressRegime; 4] = [StressRegime::Low, StressRegime::Medium, StressRegime::High, StressRegime::Extreme];

    pub fn is_high(self) -> bool {
        self >= StressRegime::High
    }
}

impl fmt::Display for StressRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Boundary values belong to the upper regime.
pub fn regime_of(stress: f64) -> Result<StressRegime> {
    if !(0.0..=1.0).contains(&stress) {
        return Err(Error::OutOfRange(format!("stress {stress}")));
    }
    Ok(if stress < 0.25 {
        StressRegime::Low
    } else if stress < 0.5 {
        StressRegime::Medium
    } else if stress < 0.75 {
        StressRegime::High
    } else {
        StressRegime::Extreme
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Objective {
    Ft,
    Util,
    Cost,
}

impl Objective {
    pub fn of(self, a: &ActionScores) -> f64 {
        match self {
            Objective::Ft => a.ft(),
            Objective::Util => a.util(),
            Objective::Cost => a.cost(),
        }
    }
}

pub type Ordering = [Objective; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrderingTable(pub BTreeMap<StressRegime, Ordering>);

impl OrderingTable {
    pub fn get(&self, r: StressRegime) -> Result<&Ordering> {
        self.0.get(&r).ok_or_else(|| Error::Config(format!("no ordering for regime {r}")))
    }

    pub fn validate(&self) -> Result<()> {
        for r in StressRegime::ALL {
            let o = self.get(r)?;
            for obj in [Objective::Ft, Objective::Util, Objective::Cost] {
                if !o.contains(&obj) {
                    return Err(Error::Config(format!("ordering for {r} is not a permutation: {o:?}")));
                }
            }
        }
        Ok(())
    }
}

pub fn default_ordering_table() -> OrderingTable {
    use Objective::*;
    let normal = [Util, Cost, Ft];
    let stressed = [Ft, Cost, Util];
    OrderingTable(BTreeMap::from([
        (StressRegime::Low, normal),
        (StressRegime::Medium, normal),
        (StressRegime::High, stressed),
        (StressRegime::Extreme, stressed),
    ]))
}

impl Default for OrderingTable {
    fn default() -> Self {
        default_ordering_table()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub delta_lex: f64,
    pub ordering_table: OrderingTable,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            delta_lex: 0.05,
            ordering_table: default_ordering_table(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta_lex) {
            return Err(Error::Config(format!("delta_lex {} outside [0,1)", self.delta_lex)));
        }
        self.ordering_table.validate()
    }
}

/// Outcome of a selection with the surviving set after each stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub winner: usize,
    pub regime: StressRegime,
    pub ordering: Ordering,
    /// `stages[k]` is the candidate set after stage k+1; `stages[2]` is the final set.
    pub stages: [Vec<usize>; 3],
}

pub fn lex_select(candidates: &BTreeMap<usize, ActionScores>, stress: f64, cfg: &SelectionConfig) -> Result<usize> {
    lex_select_traced(candidates, stress, cfg).map(|s| s.winner)
}

pub fn lex_select_traced(candidates: &BTreeMap<usize, ActionScores>, stress: f64, cfg: &SelectionConfig) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::NoFeasibleNode);
    }
    let regime = regime_of(stress)?;
    let ordering = *cfg.ordering_table.get(regime)?;
    let keep = 1.0 - cfg.delta_lex;
    let mut current: Vec<usize> = candidates.keys().copied().collect();
    let mut stages: [Vec<usize>; 3] = Default::default();
    for (k, obj) in ordering.iter().enumerate() {
        let best = current.iter().map(|id| obj.of(&candidates[id])).fold(f64::NEG_INFINITY, f64::max);
        if !best.is_finite() {
            return Err(Error::NonFinite(format!("{obj:?} scores")));
        }
        let threshold = keep * best;
        // a negative maximum would put the band above the maximum itself
        current.retain(|id| {
            let s = obj.of(&candidates[id]);
            s >= threshold || s == best
        });
        stages[k] = current.clone();
    }
    Ok(Selection {
        winner: current[0],
        regime,
        ordering,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Objective::*;

    fn cands(v: &[(usize, [f64; 3])]) -> BTreeMap<usize, ActionScores> {
        v.iter().map(|&(i, a)| (i, ActionScores(a))).collect()
    }

    fn fixed(delta: f64, o: Ordering) -> SelectionConfig {
        SelectionConfig {
            delta_lex: delta,
            ordering_table: OrderingTable(StressRegime::ALL.iter().map(|&r| (r, o)).collect()),
        }
    }

    #[test]
    fn regimes() {
        assert_eq!(regime_of(0.0).unwrap(), StressRegime::Low);
        assert_eq!(regime_of(0.25).unwrap(), StressRegime::Medium);
        assert_eq!(regime_of(0.5).unwrap(), StressRegime::High);
        assert_eq!(regime_of(0.75).unwrap(), StressRegime::Extreme);
        assert_eq!(regime_of(0.9).unwrap(), StressRegime::Extreme);
        assert_eq!(regime_of(1.0).unwrap(), StressRegime::Extreme);
        assert!(regime_of(-0.01).is_err());
        assert!(regime_of(1.01).is_err());
        assert!(regime_of(f64::NAN).is_err());
    }

    #[test]
    fn default_orderings() {
        let t = default_ordering_table();
        assert_eq!(t.get(StressRegime::High).unwrap(), &[Ft, Cost, Util]);
        assert_eq!(t.get(StressRegime::Extreme).unwrap(), &[Ft, Cost, Util]);
        assert_eq!(t.get(StressRegime::Low).unwrap(), &[Util, Cost, Ft]);
        assert_eq!(t.get(StressRegime::Medium).unwrap(), &[Util, Cost, Ft]);
        t.validate().unwrap();
        let mut bad = t.clone();
        bad.0.insert(StressRegime::Low, [Ft, Ft, Cost]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json() {
        let cfg: SelectionConfig = serde_json::from_str(r#"{"delta_lex":0.1,"ordering_table":{"Low":["FT","UTIL","COST"],"Medium":["FT","UTIL","COST"],"High":["FT","UTIL","COST"],"Extreme":["COST","UTIL","FT"]}}"#).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.ordering_table.get(StressRegime::Extreme).unwrap(), &[Cost, Util, Ft]);
        assert!(serde_json::from_str::<SelectionConfig>(r#"{"delta":0.1}"#).is_err());
        assert!(SelectionConfig { delta_lex: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn hand_traces() {
        let c = cands(&[(7, [0.3, 0.3, 0.3])]);
        assert_eq!(lex_select(&c, 0.1, &SelectionConfig::default()).unwrap(), 7);

        let c = cands(&[(0, [0.9, 0.1, 0.1]), (1, [0.8, 0.9, 0.9])]);
        assert_eq!(lex_select(&c, 0.1, &fixed(0.0, [Ft, Util, Cost])).unwrap(), 0);

        let c = cands(&[(0, [0.96, 0.2, 0.5]), (1, [1.0, 0.9, 0.1])]);
        let s = lex_select_traced(&c, 0.1, &fixed(0.05, [Ft, Util, Cost])).unwrap();
        assert_eq!(s.stages[0], vec![0, 1]);
        assert_eq!(s.stages[1], vec![1]);
        assert_eq!(s.winner, 1);

        let c = cands(&[(5, [0.4; 3]), (2, [0.4; 3]), (9, [0.4; 3])]);
        assert_eq!(lex_select(&c, 0.6, &SelectionConfig::default()).unwrap(), 2);

        assert!(matches!(lex_select(&BTreeMap::new(), 0.1, &SelectionConfig::default()), Err(Error::NoFeasibleNode)));
    }

    #[test]
    fn stress_switches_ordering() {
        // node 0 is the utilisation pick, node 1 the fault-tolerance pick
        let c = cands(&[(0, [0.2, 0.9, 0.5]), (1, [0.9, 0.2, 0.5])]);
        let cfg = SelectionConfig::default();
        assert_eq!(lex_select(&c, 0.1, &cfg).unwrap(), 0);
        assert_eq!(lex_select(&c, 0.8, &cfg).unwrap(), 1);
    }

    fn brute(c: &BTreeMap<usize, ActionScores>, o: Ordering, delta: f64) -> usize {
        let mut set: Vec<usize> = c.keys().copied().collect();
        for obj in o {
            let mut best = f64::NEG_INFINITY;
            for id in &set {
                if obj.of(&c[id]) > best {
                    best = obj.of(&c[id]);
                }
            }
            let mut next = Vec::new();
            for id in &set {
                if obj.of(&c[id]) >= (1.0 - delta) * best {
                    next.push(*id);
                }
            }
            set = next;
        }
        *set.iter().min().unwrap()
    }

    fn arb_cands() -> impl Strategy<Value = BTreeMap<usize, ActionScores>> {
        proptest::collection::btree_map(0usize..20, proptest::array::uniform3(0.001f64..0.999), 1..7)
            .prop_map(|m| m.into_iter().map(|(k, v)| (k, ActionScores(v))).collect())
    }

    proptest! {
        #[test]
        fn nested_and_member(c in arb_cands(), stress in 0.0f64..=1.0, delta in 0.0f64..0.5) {
            let cfg = SelectionConfig { delta_lex: delta, ..Default::default() };
            let s = lex_select_traced(&c, stress, &cfg).unwrap();
            let all: Vec<usize> = c.keys().copied().collect();
            prop_assert!(s.stages[0].iter().all(|i| all.contains(i)));
            prop_assert!(s.stages[1].iter().all(|i| s.stages[0].contains(i)));
            prop_assert!(s.stages[2].iter().all(|i| s.stages[1].contains(i)));
            prop_assert!(!s.stages[2].is_empty());
            prop_assert!(s.stages[2].contains(&s.winner));
            prop_assert_eq!(s.winner, brute(&c, s.ordering, delta));
            prop_assert_eq!(lex_select(&c, stress, &cfg).unwrap(), s.winner);
        }

        #[test]
        fn strict_argmax_affine_invariance(c in arb_cands(), scale in 0.1f64..10.0, shift in -1.0f64..1.0, which in 0usize..3) {
            let cfg = fixed(0.0, [Util, Ft, Cost]);
            let base = lex_select(&c, 0.1, &cfg).unwrap();
            let moved: BTreeMap<_, _> = c.iter().map(|(&k, a)| {
                let mut v = a.0;
                v[which] = v[which] * scale + shift;
                (k, ActionScores(v))
            }).collect();
            // rounding can merge or split exact ties; only check when no ties exist in the original
            let distinct = |k: usize| {
                let mut xs: Vec<f64> = c.values().map(|a| a.0[k]).collect();
                xs.sort_by(f64::total_cmp);
                xs.windows(2).all(|w| (w[1] - w[0]).abs() > 1e-9)
            };
            prop_assume!(distinct(which));
            prop_assert_eq!(lex_select(&moved, 0.1, &cfg).unwrap(), base);
        }

        #[test]
        fn positive_scaling_keeps_sets(c in arb_cands(), pow in -3i32..4, which in 0usize..3, delta in 0.0f64..0.3) {
            // powers of two keep every comparison exact
            let scale = 2f64.powi(pow);
            let cfg = fixed(delta, [Cost, Util, Ft]);
            let a = lex_select_traced(&c, 0.3, &cfg).unwrap();
            let scaled: BTreeMap<_, _> = c.iter().map(|(&k, s)| {
                let mut v = s.0;
                v[which] *= scale;
                (k, ActionScores(v))
            }).collect();
            let b = lex_select_traced(&scaled, 0.3, &cfg).unwrap();
            prop_assert_eq!(&a.stages, &b.stages);
            prop_assert_eq!(a.winner, b.winner);
        }
    }
}
