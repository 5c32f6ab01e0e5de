//! Synthetic graph-of-graphs: small carbon backbones carrying planted
//! functional-group motifs, linked by a rule table over group pairs.

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, LoadReport, Task};
use crate::chem::parse_smiles_with_id;
use crate::interaction::Link;

/// Motif SMILES, one per group id.
pub const MOTIFS: [&str; 8] = [
    "C(=O)O",
    "C#N",
    "c1ccccc1",
    "[N+](=O)[O-]",
    "S(=O)(=O)C",
    "P(=O)(O)O",
    "Cl",
    "Br",
];

/// Unordered group pairs that interact. The position of a pair is its
/// relation id in DDI mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleTable {
    pairs: Vec<(usize, usize)>,
}

impl RuleTable {
    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &(a, b) in pairs {
            let p = (a.min(b), a.max(b));
            if !out.contains(&p) {
                out.push(p);
            }
        }
        Self { pairs: out }
    }

    /// Each group interacts with itself only.
    pub fn diagonal(n_groups: usize) -> Self {
        Self::from_pairs(&(0..n_groups).map(|g| (g, g)).collect::<Vec<_>>())
    }

    /// Every pair of groups, including each group with itself.
    pub fn full(n_groups: usize) -> Self {
        let mut pairs = Vec::new();
        for a in 0..n_groups {
            for b in a..n_groups {
                pairs.push((a, b));
            }
        }
        Self { pairs }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Relation ids of all rule pairs matched between two group sets.
    pub fn matches(&self, a: &[usize], b: &[usize]) -> Vec<usize> {
        self.pairs
            .iter()
            .enumerate()
            .filter(|(_, &(x, y))| {
                (a.contains(&x) && b.contains(&y)) || (a.contains(&y) && b.contains(&x))
            })
            .map(|(r, _)| r)
            .collect()
    }
}

/// A synthetic dataset and the planted groups of each molecule.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub groups: Vec<Vec<usize>>,
}

fn molecule_smiles<R: Rng>(groups: &[usize], rng: &mut R) -> String {
    let backbone = rng.gen_range(2..=6usize);
    let sites = sample(rng, backbone, groups.len().min(backbone)).into_vec();
    let mut s = String::new();
    for k in 0..backbone {
        s.push('C');
        if let Some(pos) = sites.iter().position(|&p| p == k) {
            s.push('(');
            s.push_str(MOTIFS[groups[pos]]);
            s.push(')');
        }
    }
    s
}

/// Builds molecules carrying exactly the given group sets (an empty set
/// gives a bare backbone) and links every pair the rule table matches.
pub fn synth_from_groups(
    groups: &[Vec<usize>],
    rules: &RuleTable,
    task: Task,
    seed: u64,
) -> SynthDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut molecules = Vec::with_capacity(groups.len());
    let mut smiles = Vec::with_capacity(groups.len());
    for (k, g) in groups.iter().enumerate() {
        assert!(g.iter().all(|&x| x < MOTIFS.len()), "group id out of range");
        let s = molecule_smiles(g, &mut rng);
        let id = format!("SYN{k:05}");
        molecules.push(parse_smiles_with_id(&id, &s).expect("motif SMILES are valid"));
        smiles.push(s);
    }
    let mut links = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let rels = rules.matches(&groups[i], &groups[j]);
            match task {
                Task::Cci if !rels.is_empty() => links.push(Link::untyped(i, j)),
                Task::Cci => {}
                Task::Ddi => links.extend(rels.into_iter().map(|r| Link::typed(i, r, j))),
            }
        }
    }
    let relations = match task {
        Task::Cci => Vec::new(),
        Task::Ddi => rules
            .pairs()
            .iter()
            .map(|(a, b)| format!("G{a}-G{b}"))
            .collect(),
    };
    let report = LoadReport {
        molecules: molecules.len(),
        edges: links.len(),
        ..LoadReport::default()
    };
    SynthDataset {
        dataset: Dataset {
            task,
            molecules,
            smiles,
            links,
            relations,
            threshold: None,
            report,
        },
        groups: groups.to_vec(),
    }
}

/// `n_molecules` molecules, each planted with 1 or 2 distinct groups drawn
/// from `0..n_groups`.
pub fn synth_generate(
    n_molecules: usize,
    n_groups: usize,
    rules: &RuleTable,
    task: Task,
    seed: u64,
) -> SynthDataset {
    assert!(
        (2..=MOTIFS.len()).contains(&n_groups),
        "n_groups must lie in 2..=8"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9a7c);
    let groups: Vec<Vec<usize>> = (0..n_molecules)
        .map(|_| {
            let k = rng.gen_range(1..=2usize);
            let mut g = sample(&mut rng, n_groups, k).into_vec();
            g.sort_unstable();
            g
        })
        .collect();
    synth_from_groups(&groups, rules, task, seed)
}
