use gognn::chem::{parse_smiles, BondOrder, MoleculeGraph};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ATOMS: &[&str] = &[
    "C", "N", "O", "S", "P", "F", "Cl", "Br", "I", "B", "c", "n", "o", "s", "[NH4+]", "[O-]",
    "[nH]", "[Fe+2]", "[C-]", "[Na+]",
];
const BONDS: &[&str] = &["", "", "", "=", "#", ":", "-"];

/// A chain grammar with branches and ring closures; not every output is
/// chemically valid.
fn grammar_smiles(rng: &mut ChaCha8Rng, depth: usize, out: &mut String, open: &mut Vec<u32>) {
    let len = rng.gen_range(1..=5);
    for k in 0..len {
        if k > 0 {
            out.push_str(BONDS[rng.gen_range(0..BONDS.len())]);
        }
        out.push_str(ATOMS[rng.gen_range(0..ATOMS.len())]);
        if rng.gen_bool(0.25) {
            if let Some(d) = open.pop().filter(|_| rng.gen_bool(0.6)) {
                out.push_str(&ring_label(d));
            } else {
                let d = rng.gen_range(1..=12);
                open.push(d);
                out.push_str(&ring_label(d));
            }
        }
        if depth < 3 && rng.gen_bool(0.3) {
            out.push('(');
            out.push_str(BONDS[rng.gen_range(0..BONDS.len())]);
            grammar_smiles(rng, depth + 1, out, open);
            out.push(')');
        }
    }
}

fn ring_label(d: u32) -> String {
    if d < 10 {
        d.to_string()
    } else {
        format!("%{d}")
    }
}

fn generated(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::new();
    let mut open = Vec::new();
    grammar_smiles(&mut rng, 0, &mut s, &mut open);
    while let Some(d) = open.pop() {
        if rng.gen_bool(0.8) {
            s.push('C');
            s.push_str(&ring_label(d));
        }
    }
    s
}

fn check_graph(g: &MoleculeGraph) -> Result<(), TestCaseError> {
    let a = g.adjacency();
    let n = g.atom_count();
    prop_assert!(n >= 1);
    for i in 0..n {
        prop_assert_eq!(a.get(i, i), 0.0);
        for j in 0..n {
            let w = a.get(i, j);
            prop_assert_eq!(w, a.get(j, i));
            prop_assert!([0.0, 1.0, 1.5, 2.0, 3.0].contains(&w), "weight {}", w);
        }
    }
    for b in g.bonds() {
        prop_assert!(b.i != b.j && b.i < n && b.j < n);
    }
    for atom in g.atoms() {
        prop_assert_eq!(atom.feature.len(), 32);
        prop_assert!(atom.feature[29..].iter().all(|&v| v == 0.0));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn grammar_strings_parse_or_fail_with_location(seed in any::<u64>()) {
        let s = generated(seed);
        match parse_smiles(&s) {
            Ok(g) => check_graph(&g)?,
            Err(e) => prop_assert!(e.offset <= s.len(), "{s}: {e}"),
        }
    }

    #[test]
    fn mutated_strings_never_panic(seed in any::<u64>(), edits in prop::collection::vec((any::<usize>(), any::<u8>()), 1..4)) {
        let mut bytes = generated(seed).into_bytes();
        for (pos, byte) in edits {
            let p = pos % (bytes.len() + 1);
            if byte % 3 == 0 && p < bytes.len() {
                bytes.remove(p);
            } else {
                bytes.insert(p, b"()[]=#:%+-123456789@/\\.HCNOcnx "[byte as usize % 30]);
            }
        }
        let s = String::from_utf8_lossy(&bytes).into_owned();
        match parse_smiles(&s) {
            Ok(g) => check_graph(&g)?,
            Err(e) => prop_assert!(e.offset <= s.len(), "{s}: {e}"),
        }
    }

    #[test]
    fn arbitrary_text_never_panics(s in "\\PC{0,40}") {
        if let Err(e) = parse_smiles(&s) {
            prop_assert!(e.offset <= s.len());
        }
    }
}

type Label = (u8, i32, bool, u32);

fn label(g: &MoleculeGraph, k: usize) -> Label {
    let a = &g.atoms()[k];
    (
        a.element.atomic_number(),
        a.formal_charge,
        a.aromatic,
        a.hydrogens,
    )
}

fn bond_matrix(g: &MoleculeGraph) -> Vec<Vec<Option<BondOrder>>> {
    let n = g.atom_count();
    let mut m = vec![vec![None; n]; n];
    for b in g.bonds() {
        m[b.i][b.j] = Some(b.order);
        m[b.j][b.i] = Some(b.order);
    }
    m
}

/// Brute-force labelled-graph isomorphism by backtracking.
fn isomorphic(a: &MoleculeGraph, b: &MoleculeGraph) -> bool {
    let n = a.atom_count();
    if n != b.atom_count() || a.bonds().len() != b.bonds().len() {
        return false;
    }
    let (ma, mb) = (bond_matrix(a), bond_matrix(b));
    fn extend(
        k: usize,
        map: &mut Vec<usize>,
        used: &mut Vec<bool>,
        a: &MoleculeGraph,
        b: &MoleculeGraph,
        ma: &[Vec<Option<BondOrder>>],
        mb: &[Vec<Option<BondOrder>>],
    ) -> bool {
        let n = a.atom_count();
        if k == n {
            return true;
        }
        for cand in 0..n {
            if used[cand] || label(a, k) != label(b, cand) {
                continue;
            }
            if (0..k).any(|p| ma[k][p] != mb[cand][map[p]]) {
                continue;
            }
            map.push(cand);
            used[cand] = true;
            if extend(k + 1, map, used, a, b, ma, mb) {
                return true;
            }
            map.pop();
            used[cand] = false;
        }
        false
    }
    extend(0, &mut Vec::new(), &mut vec![false; n], a, b, &ma, &mb)
}

#[test]
fn equivalent_spellings_are_isomorphic() {
    let pairs = [
        ("OCC", "CCO"),
        ("C(C)O", "CCO"),
        ("c1ccccc1O", "Oc1ccccc1"),
        ("CC(=O)O", "OC(C)=O"),
        ("C#N", "N#C"),
        ("CC(C)(C)C", "C(C)(C)(C)C"),
        ("C1CC1C", "CC1CC1"),
        ("C[N+](=O)[O-]", "[O-][N+](C)=O"),
        ("ClC(Br)=C", "C=C(Cl)Br"),
        ("c1ccncc1", "n1ccccc1"),
    ];
    for (x, y) in pairs {
        let (gx, gy) = (parse_smiles(x).unwrap(), parse_smiles(y).unwrap());
        assert!(isomorphic(&gx, &gy), "{x} vs {y}");
    }
    let (a, b) = (parse_smiles("CCO").unwrap(), parse_smiles("COC").unwrap());
    assert!(!isomorphic(&a, &b));
}

#[test]
fn corpus_adjacency_is_symmetric_with_known_weights() {
    let corpus = [
        "C",
        "CCO",
        "C=C",
        "C#C",
        "c1ccccc1",
        "CC(=O)Oc1ccccc1C(=O)O",
        "C1CCCCC1",
        "[NH4+]",
        "C[N+](=O)[O-]",
        "O=S(=O)(O)O",
        "CN1C=NC2=C1C(=O)N(C(=O)N2C)C",
        "c1ccc2ccccc2c1",
        "ClC(Cl)(Cl)Cl",
        "N#CC#N",
        "OP(=O)(O)O",
    ];
    for s in corpus {
        let g = parse_smiles(s).unwrap();
        check_graph(&g).unwrap_or_else(|e| panic!("{s}: {e}"));
    }
}

#[test]
fn grammar_reaches_valid_molecules() {
    let ok = (0..500u64)
        .filter(|&s| parse_smiles(&generated(s)).is_ok())
        .count();
    assert!(ok >= 100, "only {ok}/500 generated strings parsed");
}
