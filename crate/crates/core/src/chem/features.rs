use super::{AtomNode, Element, MoleculeGraph};

pub const FEATURE_DIM: usize = 32;

// Layout of the atom feature vector.
const ELEMENT: usize = 0; // 11 slots: 10 elements + other
const DEGREE: usize = 11; // 6 slots: 0..=5
const CHARGE: usize = 17; // 5 slots: -2..=+2
const AROMATIC: usize = 22;
const HYDROGENS: usize = 23; // 5 slots: 0..=4
const RING: usize = 28;
// 29..32 are zero padding.

/// Fixed 32-wide atom encoding. Out-of-range degree, charge and hydrogen
/// counts fall into the last slot of their block.
pub fn encode_atom_features(atom: &AtomNode, _graph: &MoleculeGraph) -> Vec<f64> {
    let mut f = vec![0.0; FEATURE_DIM];
    f[ELEMENT + atom.element.feature_slot()] = 1.0;
    f[DEGREE + (atom.degree as usize).min(5)] = 1.0;
    let charge = if (-2..=2).contains(&atom.formal_charge) {
        (atom.formal_charge + 2) as usize
    } else {
        4
    };
    f[CHARGE + charge] = 1.0;
    if atom.aromatic {
        f[AROMATIC] = 1.0;
    }
    f[HYDROGENS + (atom.hydrogens as usize).min(4)] = 1.0;
    if atom.in_ring {
        f[RING] = 1.0;
    }
    debug_assert_eq!(
        f[ELEMENT..ELEMENT + Element::SUPPORTED.len() + 1]
            .iter()
            .sum::<f64>(),
        1.0
    );
    f
}
