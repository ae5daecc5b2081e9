use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::critical::PrecedenceDag;
use super::topology::{
    apply_delays, gen_topology, place_forks, DelayDist, DelayKind, DelayModel, ForkPlacement,
    TopologySpec,
};
use crate::depgraph::{DependencyGraph, ModuleKey};
use crate::suptree::{ChildSpec, InitCost, SupervisorFlags};
use crate::trace::NodePath;

/// A generated system whose startup cannot deadlock under `placement`.
#[derive(Clone, Debug)]
pub struct RandomSystem {
    pub seed: u64,
    /// Tree with delays applied and forks placed.
    pub root: ChildSpec,
    pub graph: DependencyGraph,
    pub placement: ForkPlacement,
    pub tagged: usize,
}

/// Random topology, uniform 1..=20 ms sleep delays, a random fork placement
/// and a random condition graph over 10 to 50 of the tree's nodes.
///
/// Wait edges are drawn at random and kept only while the combined
/// precedence graph of tree and conditions stays acyclic for the chosen
/// placement; such a system is also acyclic with every child concurrent.
pub fn random_system(seed: u64) -> RandomSystem {
    generate(seed, true)
}

/// Like [`random_system`] but with no fork points, so the graph is acyclic
/// for a fully sequential startup.
pub fn random_sequential_system(seed: u64) -> RandomSystem {
    generate(seed, false)
}

fn generate(seed: u64, forks: bool) -> RandomSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // at least ten nodes, so the graph can span ten modules
    let mut root = loop {
        let t = gen_topology(&TopologySpec::random(rng.gen()))
            .expect("default random topology is valid");
        if t.node_count() >= 10 {
            break t;
        }
    };
    apply_delays(
        &mut root,
        &DelayModel {
            kind: DelayKind::Sleep,
            dist: DelayDist::UniformMs {
                lo: 1,
                hi: 20,
                seed: rng.gen(),
            },
        },
    );

    let mut nodes: Vec<(NodePath, ModuleKey)> = Vec::new();
    collect(&root, NodePath::root(&root.id), &mut nodes);

    let bias: f64 = if forks { rng.gen_range(0.0..0.6) } else { 0.0 };
    let forks: Vec<NodePath> = nodes
        .iter()
        .skip(1)
        .filter(|_| rng.gen_bool(bias))
        .map(|(p, _)| p.clone())
        .collect();
    let placement = ForkPlacement::Explicit(forks);
    let tagged = place_forks(&mut root, &placement).expect("paths come from the tree");

    let want = rng.gen_range(10..=50).min(nodes.len());
    let mut chosen: Vec<ModuleKey> = nodes.iter().map(|(_, k)| k.clone()).collect();
    chosen.shuffle(&mut rng);
    chosen.truncate(want);
    let cond = |k: &ModuleKey| format!("c_{}", k.args.as_ref().expect("exact key").as_str());

    let mut base = DependencyGraph::new();
    for k in &chosen {
        base = base.condition(k.clone(), &cond(k));
    }
    let mut groups: Vec<String> = Vec::new();
    for g in 0..rng.gen_range(0..=3usize) {
        let size = rng.gen_range(2..=4usize).min(chosen.len());
        let members: Vec<String> = chosen.choose_multiple(&mut rng, size).map(cond).collect();
        let refs: Vec<&str> = members.iter().map(String::as_str).collect();
        let name = format!("g_{g}");
        base = base.group(&name, &refs);
        groups.push(name);
    }

    let mut waits: BTreeMap<ModuleKey, Vec<String>> = BTreeMap::new();
    let build = |waits: &BTreeMap<ModuleKey, Vec<String>>| {
        let mut g = base.clone();
        for (k, names) in waits {
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            g = g.precondition(k.clone(), &refs);
        }
        g
    };
    let candidates = rng.gen_range(chosen.len()..=2 * chosen.len());
    for _ in 0..candidates {
        let waiter = chosen.choose(&mut rng).unwrap().clone();
        let target = if !groups.is_empty() && rng.gen_bool(0.15) {
            groups.choose(&mut rng).unwrap().clone()
        } else {
            cond(chosen.choose(&mut rng).unwrap())
        };
        if waits.get(&waiter).is_some_and(|v| v.contains(&target)) {
            continue;
        }
        waits.entry(waiter.clone()).or_default().push(target);
        let ok = PrecedenceDag::build(std::slice::from_ref(&root), &build(&waits))
            .and_then(|d| d.longest_path())
            .is_ok();
        if !ok {
            let v = waits.get_mut(&waiter).unwrap();
            v.pop();
            if v.is_empty() {
                waits.remove(&waiter);
            }
        }
    }

    RandomSystem {
        seed,
        root,
        graph: build(&waits),
        placement,
        tagged,
    }
}

fn collect(n: &ChildSpec, path: NodePath, out: &mut Vec<(NodePath, ModuleKey)>) {
    out.push((path.clone(), n.key()));
    for c in n.children() {
        collect(c, path.child(&c.id), out);
    }
}

/// A root with `lanes` concurrent lane supervisors sharing `workers` workers
/// as evenly as possible; each lane starts its workers sequentially. Only
/// workers carry `cost`, so the number of lanes is the number of inits that
/// can run at once.
pub fn lane_tree(lanes: usize, workers: usize, cost: InitCost) -> ChildSpec {
    let lanes = lanes.max(1);
    let children = (0..lanes)
        .map(|l| {
            let count = workers / lanes + usize::from(l < workers % lanes);
            let id = format!("lane_{l}");
            let ws = (0..count)
                .map(|w| {
                    let wid = format!("{id}_w{w}");
                    ChildSpec::worker(&wid, "srv", &wid).cost(cost.clone())
                })
                .collect();
            ChildSpec::supervisor(&id, "sup", &id, SupervisorFlags::default(), ws).concurrent()
        })
        .collect();
    ChildSpec::supervisor(
        "lanes",
        "sup",
        "lanes",
        SupervisorFlags::default(),
        children,
    )
}
