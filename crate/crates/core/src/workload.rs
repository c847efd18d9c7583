//! Pod templates and random arrival streams.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{FaultMode, Lifetime, PodSpec, PriorityClass};
use crate::error::{Error, Result};
use crate::sim::{EventKind, SimEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodTemplate {
    pub app_label: String,
    /// Mean CPU request, milli-cores.
    pub cpu: u64,
    /// Mean memory request, MiB.
    pub mem: u64,
    /// Requests are drawn uniformly from `mean·(1 ± jitter)`.
    #[serde(default)]
    pub jitter: f64,
    pub lifetime: Lifetime,
    pub fault_mode: FaultMode,
    pub priority_class: PriorityClass,
    #[serde(default)]
    pub tolerations: BTreeSet<String>,
}

impl PodTemplate {
    pub fn new(app: &str, cpu: u64, mem: u64) -> Self {
        PodTemplate {
            app_label: app.into(),
            cpu,
            mem,
            jitter: 0.0,
            lifetime: Lifetime::Infinite,
            fault_mode: FaultMode::None,
            priority_class: PriorityClass::Normal,
            tolerations: BTreeSet::new(),
        }
    }

    pub fn with_lifetime(mut self, secs: f64) -> Self {
        self.lifetime = Lifetime::Seconds(secs);
        self
    }

    pub fn with_fault(mut self, f: FaultMode) -> Self {
        self.fault_mode = f;
        self
    }

    pub fn with_jitter(mut self, j: f64) -> Self {
        self.jitter = j;
        self
    }

    pub fn with_priority(mut self, p: PriorityClass) -> Self {
        self.priority_class = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.cpu == 0 || self.mem == 0 {
            return Err(Error::Config(format!("template {} has a zero request", self.app_label)));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("template {} jitter {} outside [0,1)", self.app_label, self.jitter)));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(mean: u64, jitter: f64, rng: &mut R) -> u64 {
        if jitter == 0.0 {
            return mean;
        }
        let m = mean as f64;
        (rng.random_range(m * (1.0 - jitter)..=m * (1.0 + jitter)).round() as u64).max(1)
    }

    pub fn instantiate<R: Rng + ?Sized>(&self, pod_id: String, rng: &mut R) -> PodSpec {
        PodSpec {
            pod_id,
            app_label: self.app_label.clone(),
            cpu_request: Self::draw(self.cpu, self.jitter, rng),
            mem_request: Self::draw(self.mem, self.jitter, rng),
            lifetime: self.lifetime,
            fault_mode: self.fault_mode,
            priority_class: self.priority_class,
            tolerations: self.tolerations.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedTemplate {
    pub weight: f64,
    pub template: PodTemplate,
}

/// Poisson arrivals drawn from a weighted template mix; used for training episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingWorkload {
    pub mean_interarrival: f64,
    /// Extra simulated time after the last arrival before an episode ends.
    pub drain_secs: f64,
    pub mix: Vec<WeightedTemplate>,
}

impl Default for TrainingWorkload {
    fn default() -> Self {
        let w = |weight, template| WeightedTemplate { weight, template };
        TrainingWorkload {
            mean_interarrival: 3.0,
            drain_secs: 300.0,
            mix: vec![
                w(3.0, PodTemplate::new("nginx", 100, 128).with_lifetime(900.0)),
                w(2.0, PodTemplate::new("stress-ng", 250, 512).with_lifetime(900.0).with_fault(FaultMode::OomKill { spike_to: 1024, after: 120.0 })),
                w(2.0, PodTemplate::new("peak", 500, 800).with_jitter(0.5).with_lifetime(600.0)),
                w(1.0, PodTemplate::new("batch", 1500, 2048).with_lifetime(300.0).with_priority(PriorityClass::Batch)),
                w(3.0, PodTemplate::new("busybox", 50, 64).with_lifetime(900.0).with_fault(FaultMode::LivenessFail { after: 60.0 })),
                w(2.0, PodTemplate::new("oom", 100, 256).with_lifetime(600.0).with_fault(FaultMode::OomKill { spike_to: 65536, after: 60.0 })),
                w(1.0, PodTemplate::new("burst", 1000, 1024).with_lifetime(90.0).with_priority(PriorityClass::Burst)),
            ],
        }
    }
}

impl TrainingWorkload {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_interarrival > 0.0) || self.drain_secs < 0.0 {
            return Err(Error::Config("workload timing must be positive".into()));
        }
        if self.mix.is_empty() || self.mix.iter().any(|w| !(w.weight >= 0.0)) || self.mix.iter().all(|w| w.weight == 0.0) {
            return Err(Error::Config("workload mix needs positive weights".into()));
        }
        self.mix.iter().try_for_each(|w| w.template.validate())
    }

    /// `n` arrivals starting at t=0 with exponential gaps.
    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<SimEvent> {
        let total: f64 = self.mix.iter().map(|w| w.weight).sum();
        let mut t = 0.0;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut pick = rng.random::<f64>() * total;
            let mut chosen = &self.mix[self.mix.len() - 1].template;
            for w in &self.mix {
                if pick < w.weight {
                    chosen = &w.template;
                    break;
                }
                pick -= w.weight;
            }
            let pod = chosen.instantiate(format!("{}-{i}", chosen.app_label), rng);
            out.push(SimEvent { time: t, kind: EventKind::PodArrival(pod) });
            let u: f64 = rng.random();
            t += -self.mean_interarrival * (1.0 - u).ln();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jitter_bounds() {
        let t = PodTemplate::new("peak", 500, 800).with_jitter(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sum = 0.0;
        for i in 0..2000 {
            let p = t.instantiate(format!("p{i}"), &mut rng);
            assert!((250..=750).contains(&p.cpu_request));
            assert!((400..=1200).contains(&p.mem_request));
            sum += p.cpu_request as f64;
        }
        assert!((sum / 2000.0 - 500.0).abs() < 10.0);
        assert_eq!(PodTemplate::new("a", 7, 9).instantiate("x".into(), &mut rng).cpu_request, 7);
    }

    #[test]
    fn generated_stream() {
        let w = TrainingWorkload::default();
        w.validate().unwrap();
        let a = w.generate(100, &mut ChaCha8Rng::seed_from_u64(3));
        let b = w.generate(100, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert!(a.windows(2).all(|p| p[0].time <= p[1].time));
        let ids: BTreeSet<_> = a
            .iter()
            .map(|e| match &e.kind {
                EventKind::PodArrival(p) => p.pod_id.clone(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(ids.len(), 100);
        let mut bad = w.clone();
        bad.mix.clear();
        assert!(bad.validate().is_err());
    }
}
