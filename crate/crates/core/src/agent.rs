//! Per-node actor, centralised critic, their target copies, and Polyak
//! averaging.
//!
//! The critic of agent i scores its own (observation, action) pair together
//! with the mean of a learned encoding of every other agent's pair, so the
//! input width does not depend on the number of nodes.

use rand::Rng;

use crate::autodiff::{Activation, Mlp, NodeId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::gnn::{Observation, OBSERVATION};
use crate::weights::{export_store, import_store, WeightsFile};

pub const ACTIONS: usize = 3;
pub const OBS_ACT: usize = OBSERVATION + ACTIONS;
pub const POOLED: usize = 128;

const ACTOR_ACTS: [Activation; 3] = [Activation::Relu, Activation::Relu, Activation::Sigmoid];
const OTHER_ACTS: [Activation; 2] = [Activation::Relu, Activation::Identity];
const MAIN_ACTS: [Activation; 3] = [Activation::Relu, Activation::Relu, Activation::Identity];

/// `[score_FT, score_UTIL, score_COST]`, each in (0,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionScores(pub [f64; ACTIONS]);

impl ActionScores {
    pub fn ft(&self) -> f64 {
        self.0[0]
    }

    pub fn util(&self) -> f64 {
        self.0[1]
    }

    pub fn cost(&self) -> f64 {
        self.0[2]
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        let arr: [f64; ACTIONS] = s
            .try_into()
            .map_err(|_| Error::Shape(format!("{} action entries", s.len())))?;
        Ok(ActionScores(arr))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorNet {
    pub store: ParamStore,
    pub mlp: Mlp,
}

impl ActorNet {
    /// 26 → 128 ReLU → 64 ReLU → 3 sigmoid.
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mlp = Mlp::init(&mut store, "l", &[OBSERVATION, 128, 64, ACTIONS], &ACTOR_ACTS, rng);
        ActorNet { store, mlp }
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let mlp = Mlp::bind(&store, "l", &ACTOR_ACTS)?;
        if mlp.inputs() != OBSERVATION || mlp.outputs() != ACTIONS {
            return Err(Error::Shape(format!("actor maps {} -> {}", mlp.inputs(), mlp.outputs())));
        }
        Ok(ActorNet { store, mlp })
    }

    /// Scores for a batch of observations `[B×26]` → `[B×3]`.
    pub fn infer(&self, obs: &Tensor) -> Result<Tensor> {
        self.mlp.infer(&self.store, obs)
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, obs: NodeId) -> Result<NodeId> {
        self.mlp.forward(tape, &self.store, obs)
    }
}

pub fn actor_forward(actor: &ActorNet, o: &Observation) -> Result<ActionScores> {
    let y = actor.infer(&Tensor::row(o.0.to_vec()))?;
    ActionScores::from_slice(y.data())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub store: ParamStore,
    pub other: Mlp,
    pub main: Mlp,
}

/// Stacked critic inputs for a batch: each sample's own `[o, a]` row and
/// the `[o, a]` rows of its other agents, tagged with the sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticBatch {
    pub own: Tensor,
    pub others: Tensor,
    pub segs: Vec<usize>,
}

impl CriticBatch {
    pub fn new(own: Vec<[f64; OBS_ACT]>, others: Vec<(usize, [f64; OBS_ACT])>) -> Self {
        let b = own.len();
        let own = Tensor::from_parts(vec![b, OBS_ACT], own.into_iter().flatten().collect());
        let segs = others.iter().map(|(s, _)| *s).collect();
        let others = Tensor::from_parts(vec![others.len(), OBS_ACT], others.into_iter().flat_map(|(_, r)| r).collect());
        CriticBatch { own, others, segs }
    }

    pub fn single(own: (&Observation, &ActionScores), others: &[(Observation, ActionScores)]) -> Self {
        Self::new(vec![join(own.0, own.1)], others.iter().map(|(o, a)| (0, join(o, a))).collect())
    }

    pub fn len(&self) -> usize {
        self.own.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn join(o: &Observation, a: &ActionScores) -> [f64; OBS_ACT] {
    let mut r = [0.0; OBS_ACT];
    r[..OBSERVATION].copy_from_slice(&o.0);
    r[OBSERVATION..].copy_from_slice(&a.0);
    r
}

impl CriticNet {
    /// Other-agent encoder 29 → 64 ReLU → 128; head 157 → 128 ReLU → 64 ReLU → 1.
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let other = Mlp::init(&mut store, "other", &[OBS_ACT, 64, POOLED], &OTHER_ACTS, rng);
        let main = Mlp::init(&mut store, "main", &[OBS_ACT + POOLED, 128, 64, 1], &MAIN_ACTS, rng);
        CriticNet { store, other, main }
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let other = Mlp::bind(&store, "other", &OTHER_ACTS)?;
        let main = Mlp::bind(&store, "main", &MAIN_ACTS)?;
        if other.inputs() != OBS_ACT || main.inputs() != OBS_ACT + other.outputs() || main.outputs() != 1 {
            return Err(Error::Shape("critic layer widths do not chain".into()));
        }
        Ok(CriticNet { store, other, main })
    }

    /// Q for each sample of `batch`, `[B×1]` on the tape.
    ///
    /// `own` may already be a tape node (e.g. an action produced by an actor
    /// on the same tape); `frozen` reads the critic's parameters as constants.
    pub fn forward_nodes<'a>(&'a self, tape: &mut Tape<'a>, own: NodeId, others: NodeId, segs: &[usize], frozen: bool) -> Result<NodeId> {
        critic_on_tape(&self.store, &self.other, &self.main, tape, own, others, segs, frozen)
    }

    pub fn q_values(&self, batch: &CriticBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let own = tape.input(batch.own.clone());
        let others = tape.input(batch.others.clone());
        let q = self.forward_nodes(&mut tape, own, others, &batch.segs, true)?;
        Ok(tape.value(q).data().to_vec())
    }
}

#[allow(clippy::too_many_arguments)]
pub fn critic_on_tape<'a>(
    store: &'a ParamStore,
    other: &Mlp,
    main: &Mlp,
    tape: &mut Tape<'a>,
    own: NodeId,
    others: NodeId,
    segs: &[usize],
    frozen: bool,
) -> Result<NodeId> {
    let b = tape.value(own).rows();
    if tape.value(own).cols() != OBS_ACT || (tape.value(others).rows() > 0 && tape.value(others).cols() != OBS_ACT) {
        return Err(Error::Shape(format!("critic inputs must be {OBS_ACT} wide")));
    }
    let z = if frozen {
        other.forward_frozen(tape, store, others)?
    } else {
        other.forward(tape, store, others)?
    };
    let pooled = tape.segment_mean(z, segs.to_vec(), b)?;
    let x = tape.concat(&[own, pooled])?;
    if frozen {
        main.forward_frozen(tape, store, x)
    } else {
        main.forward(tape, store, x)
    }
}

/// Q for one agent given its own pair and every other agent's pair. With no
/// other agents the pooled encoding is the zero vector.
pub fn critic_forward(critic: &CriticNet, own: (&Observation, &ActionScores), others: &[(Observation, ActionScores)]) -> Result<f64> {
    let q = critic.q_values(&CriticBatch::single(own, others))?;
    Ok(q[0])
}

/// `target ← τ·online + (1−τ)·target`, elementwise.
pub fn soft_update(online: &ParamStore, target: &mut ParamStore, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::OutOfRange(format!("tau {tau}")));
    }
    target.check_compatible(online)?;
    let ids: Vec<_> = online.ids().collect();
    for id in ids {
        let src = online.value(id).data();
        for (t, &o) in target.value_mut(id).data_mut().iter_mut().zip(src) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentBundle {
    pub actor: ActorNet,
    pub critic: CriticNet,
    pub target_actor: ActorNet,
    pub target_critic: CriticNet,
}

impl AgentBundle {
    /// Fresh networks; targets start as exact copies.
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let actor = ActorNet::new(rng);
        let critic = CriticNet::new(rng);
        AgentBundle {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
        }
    }

    pub fn soft_update_targets(&mut self, tau: f64) -> Result<()> {
        soft_update(&self.actor.store, &mut self.target_actor.store, tau)?;
        soft_update(&self.critic.store, &mut self.target_critic.store, tau)
    }

    pub fn export(&self, index: usize, file: &mut WeightsFile) {
        export_store(file, &format!("agent{index}.actor."), &self.actor.store);
        export_store(file, &format!("agent{index}.critic."), &self.critic.store);
        export_store(file, &format!("agent{index}.target_actor."), &self.target_actor.store);
        export_store(file, &format!("agent{index}.target_critic."), &self.target_critic.store);
    }

    pub fn import(index: usize, file: &WeightsFile) -> Result<Self> {
        let bundle = AgentBundle {
            actor: ActorNet::from_store(import_store(file, &format!("agent{index}.actor."))?)?,
            critic: CriticNet::from_store(import_store(file, &format!("agent{index}.critic."))?)?,
            target_actor: ActorNet::from_store(import_store(file, &format!("agent{index}.target_actor."))?)?,
            target_critic: CriticNet::from_store(import_store(file, &format!("agent{index}.target_critic."))?)?,
        };
        bundle.actor.store.check_compatible(&bundle.target_actor.store)?;
        bundle.critic.store.check_compatible(&bundle.target_critic.store)?;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sigmoid};
    use crate::cluster::RawFeatures;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(rng: &mut ChaCha8Rng) -> Observation {
        let mut o = [0.0; OBSERVATION];
        o.iter_mut().for_each(|v| *v = rng.random());
        Observation(o)
    }

    fn act(rng: &mut ChaCha8Rng) -> ActionScores {
        ActionScores([rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn zero_actor_outputs_half() {
        let mut actor = ActorNet::new(&mut ChaCha8Rng::seed_from_u64(0));
        let ids: Vec<_> = actor.store.ids().collect();
        for id in ids {
            actor.store.value_mut(id).fill(0.0);
        }
        let o = obs(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(actor_forward(&actor, &o).unwrap().0, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn actor_is_deterministic_and_bounded() {
        let actor = ActorNet::new(&mut ChaCha8Rng::seed_from_u64(2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut o = obs(&mut rng);
            o.0.iter_mut().for_each(|v| *v *= 1e3);
            let a = actor_forward(&actor, &o).unwrap();
            assert_eq!(a, actor_forward(&actor, &o).unwrap());
            assert!(a.0.iter().all(|&s| s > 0.0 && s < 1.0));
        }
    }

    #[test]
    fn degenerate_actor_by_hand() {
        // 26 → 1 → 1 → 3 chain with hand weights
        let mut store = ParamStore::new();
        let mut w0 = vec![0.0; OBSERVATION];
        w0[0] = 2.0;
        w0[3] = -1.0;
        store.add("l.l0.weight", Tensor::matrix(1, OBSERVATION, w0).unwrap());
        store.add("l.l0.bias", Tensor::vector(vec![0.1]));
        store.add("l.l1.weight", Tensor::matrix(1, 1, vec![-0.5]).unwrap());
        store.add("l.l1.bias", Tensor::vector(vec![1.0]));
        store.add("l.l2.weight", Tensor::matrix(3, 1, vec![1.0, -2.0, 0.0]).unwrap());
        store.add("l.l2.bias", Tensor::vector(vec![0.0, 0.5, -1.0]));
        let actor = ActorNet::from_store(store).unwrap();
        let mut o = [0.0; OBSERVATION];
        o[0] = 0.5;
        o[3] = 0.25;
        let a = actor_forward(&actor, &Observation(o)).unwrap();
        let h1 = (2.0 * 0.5 - 0.25 + 0.1f64).max(0.0); // 0.85
        let h2 = (-0.5 * h1 + 1.0f64).max(0.0); // 0.575
        let want = [sigmoid(h2), sigmoid(-2.0 * h2 + 0.5), sigmoid(-1.0)];
        for (x, y) in a.0.iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((want[0] - 0.639_916_1).abs() < 1e-6);
    }

    #[test]
    fn critic_pooling_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let critic = CriticNet::new(&mut rng);
        let own = (obs(&mut rng), act(&mut rng));
        let others: Vec<_> = (0..4).map(|_| (obs(&mut rng), act(&mut rng))).collect();
        let q = critic_forward(&critic, (&own.0, &own.1), &others).unwrap();
        let mut perm = others.clone();
        perm.reverse();
        perm.swap(0, 2);
        let qp = critic_forward(&critic, (&own.0, &own.1), &perm).unwrap();
        assert!((q - qp).abs() < 1e-9);
        let doubled: Vec<_> = others.iter().chain(others.iter()).cloned().collect();
        let qd = critic_forward(&critic, (&own.0, &own.1), &doubled).unwrap();
        assert!((q - qd).abs() < 1e-9);
        // a lone agent sees a zero pooled vector
        let alone = critic_forward(&critic, (&own.0, &own.1), &[]).unwrap();
        assert!(alone.is_finite());
    }

    #[test]
    fn tiny_critic_by_hand() {
        // other: 29 → 1 ReLU → 1 identity; main: 30 → 1 ReLU → 1 ReLU → 1
        let mut store = ParamStore::new();
        let mut wo = vec![0.0; OBS_ACT];
        wo[26] = 1.0; // other's score_FT
        store.add("other.l0.weight", Tensor::matrix(1, OBS_ACT, wo).unwrap());
        store.add("other.l0.bias", Tensor::vector(vec![0.0]));
        store.add("other.l1.weight", Tensor::matrix(1, 1, vec![3.0]).unwrap());
        store.add("other.l1.bias", Tensor::vector(vec![-1.0]));
        let mut wm = vec![0.0; OBS_ACT + 1];
        wm[0] = 1.0; // own raw feature 0
        wm[OBS_ACT] = 2.0; // pooled
        store.add("main.l0.weight", Tensor::matrix(1, OBS_ACT + 1, wm).unwrap());
        store.add("main.l0.bias", Tensor::vector(vec![0.0]));
        store.add("main.l1.weight", Tensor::matrix(1, 1, vec![1.0]).unwrap());
        store.add("main.l1.bias", Tensor::vector(vec![0.0]));
        store.add("main.l2.weight", Tensor::matrix(1, 1, vec![-1.0]).unwrap());
        store.add("main.l2.bias", Tensor::vector(vec![0.5]));
        let critic = CriticNet::from_store(store).unwrap();
        let raw = RawFeatures([0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let own_o = Observation::new(&raw, &[0.0; 16]).unwrap();
        let other_o = Observation::new(&RawFeatures([0.0; 10]), &[0.0; 16]).unwrap();
        let other_a = ActionScores([0.7, 0.1, 0.1]);
        let q = critic_forward(&critic, (&own_o, &ActionScores([0.2; 3])), &[(other_o, other_a)]).unwrap();
        // z = 3·0.7 − 1 = 1.1; main: relu(0.4 + 2.2) = 2.6 → 2.6 → −2.6 + 0.5
        assert!((q - (-2.1)).abs() < 1e-12, "{q}");
    }

    #[test]
    fn soft_update_examples() {
        let mut online = ParamStore::new();
        online.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut target = ParamStore::new();
        target.add("w", Tensor::vector(vec![0.0, -2.0]));
        let orig = target.clone();

        let mut t = orig.clone();
        soft_update(&online, &mut t, 1.0).unwrap();
        assert_eq!(t.value(t.id("w").unwrap()).data(), &[1.0, 2.0]);
        let mut t = orig.clone();
        soft_update(&online, &mut t, 0.0).unwrap();
        assert_eq!(t.value(t.id("w").unwrap()).data(), &[0.0, -2.0]);
        soft_update(&online, &mut target, 0.01).unwrap();
        assert!((target.value(target.id("w").unwrap()).data()[0] - 0.01).abs() < 1e-15);

        let mut wrong = ParamStore::new();
        wrong.add("w", Tensor::vector(vec![0.0; 3]));
        assert!(soft_update(&online, &mut wrong, 0.5).is_err());
        assert!(soft_update(&online, &mut target, 1.5).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = AgentBundle::new(&mut rng);
        let mut f = WeightsFile::default();
        b.export(3, &mut f);
        assert!(f.get("agent3.actor.l.l0.weight").is_some());
        assert!(f.get("agent3.target_critic.main.l2.bias").is_some());
        let back = AgentBundle::import(3, &f).unwrap();
        assert_eq!(back, b);
        assert!(AgentBundle::import(0, &f).is_err());
    }

    #[test]
    fn actor_and_critic_gradients() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let actor = ActorNet::new(&mut rng);
            let critic = CriticNet::new(&mut rng);
            let x = Tensor::new(vec![2, OBSERVATION], (0..2 * OBSERVATION).map(|_| rng.random()).collect()).unwrap();
            let target = Tensor::new(vec![2, ACTIONS], (0..6).map(|_| rng.random()).collect()).unwrap();

            let mlp = &actor.mlp;
            let loss = |s: &ParamStore| -> Result<f64> {
                let y = mlp.infer(s, &x)?;
                Ok(y.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 6.0)
            };
            let analytic = |s: &ParamStore| {
                let mut tape = Tape::new();
                let xi = tape.input(x.clone());
                let y = mlp.forward(&mut tape, s, xi)?;
                let t = tape.input(target.clone());
                let l = tape.mse(y, t)?;
                tape.backward(l)
            };
            let err = grad_check(&actor.store, 1e-5, loss, analytic).unwrap();
            assert!(err < 1e-4, "actor seed {seed}: {err}");

            let own = Tensor::new(vec![2, OBS_ACT], (0..2 * OBS_ACT).map(|_| rng.random()).collect()).unwrap();
            let others = Tensor::new(vec![3, OBS_ACT], (0..3 * OBS_ACT).map(|_| rng.random()).collect()).unwrap();
            let segs = [0, 1, 1];
            let y = Tensor::new(vec![2, 1], vec![0.3, -0.2]).unwrap();
            let (co, cm) = (&critic.other, &critic.main);
            let run = |s: &ParamStore, grad: bool| -> Result<(f64, Option<crate::autodiff::Gradients>)> {
                let mut tape = Tape::new();
                let o = tape.input(own.clone());
                let p = tape.input(others.clone());
                let q = critic_on_tape(s, co, cm, &mut tape, o, p, &segs, false)?;
                let t = tape.input(y.clone());
                let l = tape.mse(q, t)?;
                let v = tape.value(l).item()?;
                Ok((v, if grad { Some(tape.backward(l)?) } else { None }))
            };
            let err = grad_check(&critic.store, 1e-5, |s| Ok(run(s, false)?.0), |s| Ok(run(s, true)?.1.unwrap())).unwrap();
            assert!(err < 1e-4, "critic seed {seed}: {err}");
        }
    }
}
