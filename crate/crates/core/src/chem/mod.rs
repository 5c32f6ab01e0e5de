//! Molecule graphs built from SMILES.

mod features;
mod smiles;
mod table;

pub use features::{encode_atom_features, FEATURE_DIM};
pub use smiles::{parse_smiles, parse_smiles_with_id, ParseError};
pub use table::{read_molecule_table, MoleculeRow, TableError};

use crate::tensor::Tensor;

/// Chemical element. The ten organic-subset elements get dedicated feature
/// slots; everything else shares the "other" slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Element {
    B,
    C,
    N,
    O,
    P,
    S,
    F,
    Cl,
    Br,
    I,
    /// Any other element, by atomic number.
    Other(u8),
}

const PERIODIC: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

impl Element {
    pub const SUPPORTED: [Element; 10] = [
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::P,
        Element::S,
        Element::F,
        Element::Cl,
        Element::Br,
        Element::I,
    ];

    pub fn from_symbol(sym: &str) -> Option<Element> {
        let z = PERIODIC.iter().position(|s| *s == sym)? + 1;
        Some(Self::from_atomic_number(z as u8))
    }

    pub fn from_atomic_number(z: u8) -> Element {
        match z {
            5 => Element::B,
            6 => Element::C,
            7 => Element::N,
            8 => Element::O,
            15 => Element::P,
            16 => Element::S,
            9 => Element::F,
            17 => Element::Cl,
            35 => Element::Br,
            53 => Element::I,
            other => Element::Other(other),
        }
    }

    pub fn atomic_number(self) -> u8 {
        match self {
            Element::B => 5,
            Element::C => 6,
            Element::N => 7,
            Element::O => 8,
            Element::P => 15,
            Element::S => 16,
            Element::F => 9,
            Element::Cl => 17,
            Element::Br => 35,
            Element::I => 53,
            Element::Other(z) => z,
        }
    }

    pub fn symbol(self) -> &'static str {
        PERIODIC[self.atomic_number() as usize - 1]
    }

    /// Slot in the element one-hot block (10 = other).
    pub fn feature_slot(self) -> usize {
        Self::SUPPORTED
            .iter()
            .position(|e| *e == self)
            .unwrap_or(Self::SUPPORTED.len())
    }

    /// Lowest standard valence used to infer implicit hydrogens.
    pub fn default_valence(self) -> u32 {
        match self {
            Element::B | Element::N | Element::P => 3,
            Element::C => 4,
            Element::O | Element::S => 2,
            Element::F | Element::Cl | Element::Br | Element::I => 1,
            Element::Other(_) => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BondOrder {
    Single,
    Aromatic,
    Double,
    Triple,
}

impl BondOrder {
    pub fn weight(self) -> f64 {
        match self {
            BondOrder::Single => 1.0,
            BondOrder::Aromatic => 1.5,
            BondOrder::Double => 2.0,
            BondOrder::Triple => 3.0,
        }
    }
}

/// Undirected bond with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: BondOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomNode {
    pub element: Element,
    /// Number of bonded heavy atoms.
    pub degree: u32,
    pub formal_charge: i32,
    pub aromatic: bool,
    /// Explicit (bracket) or inferred hydrogen count.
    pub hydrogens: u32,
    pub in_ring: bool,
    /// 32-wide input feature vector.
    pub feature: Vec<f64>,
}

/// A molecule as a bond-weighted atom graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeGraph {
    id: String,
    atoms: Vec<AtomNode>,
    bonds: Vec<Bond>,
}

impl MoleculeGraph {
    /// Assembles a graph, computing ring membership and atom features.
    pub(crate) fn from_parts(id: String, mut atoms: Vec<AtomNode>, bonds: Vec<Bond>) -> Self {
        let ring = ring_membership(atoms.len(), &bonds);
        for (a, r) in atoms.iter_mut().zip(ring) {
            a.in_ring = r;
        }
        let mut g = Self { id, atoms, bonds };
        for k in 0..g.atoms.len() {
            let f = encode_atom_features(&g.atoms[k], &g);
            g.atoms[k].feature = f;
        }
        g
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn atoms(&self) -> &[AtomNode] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Symmetric bond-weight matrix with a zero diagonal.
    pub fn adjacency(&self) -> Tensor {
        build_adjacency(self)
    }

    /// `n × 32` matrix of atom features.
    pub fn feature_matrix(&self) -> Tensor {
        let data = self
            .atoms
            .iter()
            .flat_map(|a| a.feature.iter().copied())
            .collect();
        Tensor::new(&[self.atoms.len(), FEATURE_DIM], data).expect("n >= 1")
    }

    /// The same molecule with atoms renumbered so that old atom `k`
    /// becomes atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.atoms.len());
        let mut atoms = vec![None; self.atoms.len()];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = Some(self.atoms[old].clone());
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| {
                let (x, y) = (perm[b.i], perm[b.j]);
                Bond {
                    i: x.min(y),
                    j: x.max(y),
                    order: b.order,
                }
            })
            .collect();
        Self {
            id: self.id.clone(),
            atoms: atoms.into_iter().map(Option::unwrap).collect(),
            bonds,
        }
    }
}

pub fn build_adjacency(g: &MoleculeGraph) -> Tensor {
    let n = g.atom_count();
    let mut a = Tensor::zeros(&[n, n]);
    let d = a.data_mut();
    for b in &g.bonds {
        d[b.i * n + b.j] = b.order.weight();
        d[b.j * n + b.i] = b.order.weight();
    }
    a
}

/// An atom is in a ring iff one of its bonds is not a bridge.
fn ring_membership(n: usize, bonds: &[Bond]) -> Vec<bool> {
    let mut adj = vec![Vec::new(); n];
    for (e, b) in bonds.iter().enumerate() {
        adj[b.i].push((b.j, e));
        adj[b.j].push((b.i, e));
    }
    let mut in_ring = vec![false; n];
    for (e, b) in bonds.iter().enumerate() {
        // Is b.j reachable from b.i without edge e?
        let mut seen = vec![false; n];
        let mut stack = vec![b.i];
        seen[b.i] = true;
        let mut reached = false;
        while let Some(u) = stack.pop() {
            if u == b.j {
                reached = true;
                break;
            }
            for &(v, f) in &adj[u] {
                if f != e && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if reached {
            in_ring[b.i] = true;
            in_ring[b.j] = true;
        }
    }
    in_ring
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_examples() {
        assert_eq!(parse_smiles("C").unwrap().adjacency().data(), &[0.0]);
        assert_eq!(
            parse_smiles("C=C").unwrap().adjacency().data(),
            &[0.0, 2.0, 2.0, 0.0]
        );
        assert_eq!(
            parse_smiles("CCO").unwrap().adjacency().data(),
            &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn element_table() {
        assert_eq!(Element::from_symbol("Cl"), Some(Element::Cl));
        assert_eq!(Element::from_symbol("Na"), Some(Element::Other(11)));
        assert_eq!(Element::from_symbol("Xx"), None);
        assert_eq!(Element::C.feature_slot(), 1);
        assert_eq!(Element::Other(26).feature_slot(), 10);
        assert_eq!(Element::Other(26).symbol(), "Fe");
    }

    /// Canonical form: sorted multiset of (atom signature, sorted neighbour
    /// signatures with bond weights). Sufficient to tell apart the fixture
    /// pairs below.
    fn invariant(g: &MoleculeGraph) -> Vec<String> {
        let a = g.adjacency();
        let n = g.atom_count();
        let mut out: Vec<String> = (0..n)
            .map(|i| {
                let at = &g.atoms()[i];
                let mut nb: Vec<String> = (0..n)
                    .filter(|&j| a.get(i, j) != 0.0)
                    .map(|j| format!("{}{}", g.atoms()[j].element.symbol(), a.get(i, j)))
                    .collect();
                nb.sort();
                format!(
                    "{}{:?}{}{}",
                    at.element.symbol(),
                    at.feature,
                    at.in_ring,
                    nb.join(",")
                )
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn equivalent_spellings_are_isomorphic() {
        let pairs = [
            ("CCO", "OCC"),
            ("CC(=O)O", "OC(C)=O"),
            ("c1ccccc1O", "Oc1ccccc1"),
            ("C1CCCCC1N", "NC1CCCCC1"),
            ("CC#N", "N#CC"),
            ("C[N+](=O)[O-]", "[O-][N+](C)=O"),
        ];
        for (a, b) in pairs {
            let (ga, gb) = (parse_smiles(a).unwrap(), parse_smiles(b).unwrap());
            assert_eq!(invariant(&ga), invariant(&gb), "{a} vs {b}");
        }
    }

    #[test]
    fn permutation_keeps_structure() {
        let g = parse_smiles("CC(=O)Oc1ccccc1").unwrap();
        let perm: Vec<usize> = (0..g.atom_count()).rev().collect();
        let p = g.permuted(&perm);
        assert_eq!(invariant(&g), invariant(&p));
    }
}
