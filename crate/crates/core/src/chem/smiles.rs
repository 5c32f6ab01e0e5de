//! Parser for the organic subset of SMILES.
//!
//! Supported: organic-subset atoms, aromatic lowercase atoms, bracket atoms
//! with hydrogen count and charge, explicit `-` `=` `#` `:` bonds, ring
//! closures (`1`..`9`, `%nn`) and branches. Stereo marks, isotopes, atom
//! classes and `.`-separated fragments are rejected.

use std::collections::HashMap;

use thiserror::Error;

use super::{AtomNode, Bond, BondOrder, Element, MoleculeGraph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("SMILES parse error at byte {offset}: {reason}")]
pub struct ParseError {
    pub offset: usize,
    pub reason: String,
}

fn err<T>(offset: usize, reason: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        offset,
        reason: reason.into(),
    })
}

#[derive(Debug)]
struct PendingAtom {
    element: Element,
    aromatic: bool,
    charge: i32,
    /// `Some` for bracket atoms, whose hydrogens are explicit.
    hydrogens: Option<u32>,
}

struct RingOpen {
    atom: usize,
    bond: Option<BondOrder>,
    offset: usize,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    atoms: Vec<PendingAtom>,
    bonds: Vec<Bond>,
    rings: HashMap<u32, RingOpen>,
}

/// Parses `smiles` into a molecule graph labelled with `id`.
pub fn parse_smiles_with_id(id: &str, smiles: &str) -> Result<MoleculeGraph, ParseError> {
    if smiles.is_empty() {
        return err(0, "empty input");
    }
    if let Some(pos) = smiles
        .bytes()
        .position(|b| !b.is_ascii() || b.is_ascii_whitespace())
    {
        return err(pos, "non-ASCII or whitespace byte");
    }
    let mut p = Parser {
        src: smiles.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        rings: HashMap::new(),
    };
    p.parse()?;
    Ok(p.finish(id))
}

/// Parses `smiles` with an empty molecule id.
pub fn parse_smiles(smiles: &str) -> Result<MoleculeGraph, ParseError> {
    parse_smiles_with_id("", smiles)
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn parse(&mut self) -> Result<(), ParseError> {
        // Stack of branch-point atoms; `prev` is the atom the next one bonds to.
        let mut branch_stack: Vec<(usize, usize)> = Vec::new();
        let mut prev: Option<usize> = None;
        let mut pending_bond: Option<(BondOrder, usize)> = None;
        // True right after '(' until the branch's first atom.
        let mut branch_open = false;

        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    let Some(atom) = prev else {
                        return err(start, "branch without a preceding atom");
                    };
                    if pending_bond.is_some() {
                        return err(start, "bond symbol before '('");
                    }
                    if branch_open {
                        return err(start, "empty branch");
                    }
                    branch_stack.push((atom, start));
                    branch_open = true;
                    self.pos += 1;
                }
                b')' => {
                    let Some((atom, _)) = branch_stack.pop() else {
                        return err(start, "unbalanced ')'");
                    };
                    if branch_open {
                        return err(start, "empty branch");
                    }
                    if pending_bond.is_some() {
                        return err(start, "dangling bond before ')'");
                    }
                    prev = Some(atom);
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' => {
                    if pending_bond.is_some() {
                        return err(start, "two consecutive bond symbols");
                    }
                    if prev.is_none() {
                        return err(start, "bond without a preceding atom");
                    }
                    let order = match c {
                        b'-' => BondOrder::Single,
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        _ => BondOrder::Aromatic,
                    };
                    pending_bond = Some((order, start));
                    self.pos += 1;
                }
                b'/' | b'\\' => return err(start, "stereo bonds are not supported"),
                b'$' => return err(start, "quadruple bonds are not supported"),
                b'.' => return err(start, "disconnected fragments ('.') are not supported"),
                b'0'..=b'9' | b'%' => {
                    let Some(atom) = prev else {
                        return err(start, "ring closure without a preceding atom");
                    };
                    if branch_open {
                        return err(start, "ring closure directly after '('");
                    }
                    let label = self.ring_label()?;
                    let bond = pending_bond.take().map(|(o, _)| o);
                    self.ring(atom, label, bond, start)?;
                }
                _ => {
                    let atom = self.atom()?;
                    if let Some(from) = prev {
                        let order = match pending_bond.take() {
                            Some((o, _)) => o,
                            None => self.implicit_order(from, atom),
                        };
                        self.add_bond(from, atom, order, start)?;
                    } else if let Some((_, off)) = pending_bond {
                        return err(off, "bond without a preceding atom");
                    }
                    prev = Some(atom);
                    branch_open = false;
                }
            }
        }
        if let Some((_, off)) = pending_bond {
            return err(off, "dangling bond at end of input");
        }
        if let Some((_, off)) = branch_stack.last() {
            return err(*off, "unclosed '('");
        }
        if let Some(open) = self.rings.values().min_by_key(|r| r.offset) {
            return err(open.offset, "unclosed ring bond");
        }
        if self.atoms.is_empty() {
            return err(0, "no atoms");
        }
        Ok(())
    }

    fn ring_label(&mut self) -> Result<u32, ParseError> {
        let start = self.pos;
        if self.peek() == Some(b'%') {
            let digits = self.src.get(self.pos + 1..self.pos + 3);
            match digits {
                Some(d) if d.iter().all(u8::is_ascii_digit) => {
                    self.pos += 3;
                    Ok(((d[0] - b'0') * 10 + (d[1] - b'0')) as u32)
                }
                _ => err(start, "'%' must be followed by two digits"),
            }
        } else {
            let d = self.src[self.pos] - b'0';
            self.pos += 1;
            Ok(d as u32)
        }
    }

    fn ring(
        &mut self,
        atom: usize,
        label: u32,
        bond: Option<BondOrder>,
        offset: usize,
    ) -> Result<(), ParseError> {
        match self.rings.remove(&label) {
            None => {
                self.rings.insert(label, RingOpen { atom, bond, offset });
                Ok(())
            }
            Some(open) => {
                if open.atom == atom {
                    return err(offset, "ring closure onto the same atom");
                }
                let order = match (open.bond, bond) {
                    (Some(a), Some(b)) if a != b => {
                        return err(offset, "conflicting ring-closure bond symbols")
                    }
                    (Some(a), _) | (None, Some(a)) => a,
                    (None, None) => self.implicit_order(open.atom, atom),
                };
                self.add_bond(open.atom, atom, order, offset)
            }
        }
    }

    fn implicit_order(&self, a: usize, b: usize) -> BondOrder {
        if self.atoms[a].aromatic && self.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn add_bond(
        &mut self,
        a: usize,
        b: usize,
        order: BondOrder,
        offset: usize,
    ) -> Result<(), ParseError> {
        let (i, j) = (a.min(b), a.max(b));
        if self.bonds.iter().any(|bd| bd.i == i && bd.j == j) {
            return err(offset, "duplicate bond between the same atoms");
        }
        self.bonds.push(Bond { i, j, order });
        Ok(())
    }

    fn atom(&mut self) -> Result<usize, ParseError> {
        let pending = if self.peek() == Some(b'[') {
            self.bracket_atom()?
        } else {
            self.organic_atom()?
        };
        self.atoms.push(pending);
        Ok(self.atoms.len() - 1)
    }

    fn organic_atom(&mut self) -> Result<PendingAtom, ParseError> {
        let start = self.pos;
        let two = self.src.get(self.pos..self.pos + 2);
        let (element, aromatic, len) = match two {
            Some(b"Cl") => (Element::Cl, false, 2),
            Some(b"Br") => (Element::Br, false, 2),
            _ => match self.src[self.pos] {
                b'B' => (Element::B, false, 1),
                b'C' => (Element::C, false, 1),
                b'N' => (Element::N, false, 1),
                b'O' => (Element::O, false, 1),
                b'P' => (Element::P, false, 1),
                b'S' => (Element::S, false, 1),
                b'F' => (Element::F, false, 1),
                b'I' => (Element::I, false, 1),
                b'b' => (Element::B, true, 1),
                b'c' => (Element::C, true, 1),
                b'n' => (Element::N, true, 1),
                b'o' => (Element::O, true, 1),
                b'p' => (Element::P, true, 1),
                b's' => (Element::S, true, 1),
                b'@' => return err(start, "chirality marks are not supported"),
                b']' => return err(start, "unexpected ']'"),
                other => {
                    return err(
                        start,
                        format!("unknown element or symbol '{}'", other as char),
                    )
                }
            },
        };
        self.pos += len;
        Ok(PendingAtom {
            element,
            aromatic,
            charge: 0,
            hydrogens: None,
        })
    }

    fn bracket_atom(&mut self) -> Result<PendingAtom, ParseError> {
        let open = self.pos;
        self.pos += 1;
        if self.peek().is_some_and(|c| c.is_ascii_digit()) {
            return err(self.pos, "isotopes are not supported");
        }
        let sym_start = self.pos;
        let (element, aromatic) = self.bracket_symbol()?;
        if self.peek() == Some(b'@') {
            return err(self.pos, "chirality marks are not supported");
        }
        let mut hydrogens = 0;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            hydrogens = match self.peek() {
                Some(d) if d.is_ascii_digit() => {
                    self.pos += 1;
                    (d - b'0') as u32
                }
                _ => 1,
            };
        }
        let mut charge = 0i32;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            match self.peek() {
                Some(d) if d.is_ascii_digit() => {
                    let mut n = 0i32;
                    while let Some(d) = self.peek().filter(u8::is_ascii_digit) {
                        n = n * 10 + (d - b'0') as i32;
                        self.pos += 1;
                        if n > 15 {
                            return err(sym_start, "charge magnitude too large");
                        }
                    }
                    charge = unit * n;
                }
                _ => {
                    charge = unit;
                    while self.peek() == Some(sign) {
                        charge += unit;
                        self.pos += 1;
                    }
                }
            }
        }
        match self.peek() {
            Some(b']') => {
                self.pos += 1;
            }
            Some(b':') => return err(self.pos, "atom classes are not supported"),
            Some(_) => return err(self.pos, "unexpected character in bracket atom"),
            None => return err(open, "unterminated bracket atom"),
        }
        Ok(PendingAtom {
            element,
            aromatic,
            charge,
            hydrogens: Some(hydrogens),
        })
    }

    fn bracket_symbol(&mut self) -> Result<(Element, bool), ParseError> {
        let start = self.pos;
        let rest = &self.src[self.pos..];
        // Aromatic two-letter forms first.
        for (sym, el) in [(&b"se"[..], "Se"), (&b"as"[..], "As")] {
            if rest.starts_with(sym) {
                self.pos += 2;
                return Ok((Element::from_symbol(el).expect("table entry"), true));
            }
        }
        match rest.first() {
            Some(&c @ (b'b' | b'c' | b'n' | b'o' | b'p' | b's')) => {
                self.pos += 1;
                let upper = (c.to_ascii_uppercase() as char).to_string();
                return Ok((Element::from_symbol(&upper).expect("organic"), true));
            }
            Some(c) if c.is_ascii_uppercase() => {}
            _ => return err(start, "expected an element symbol"),
        }
        // Longest match: upper + lower, then upper alone.
        if let Some(&l) = rest.get(1).filter(|c| c.is_ascii_lowercase()) {
            let sym = format!("{}{}", rest[0] as char, l as char);
            if let Some(el) = Element::from_symbol(&sym) {
                self.pos += 2;
                return Ok((el, false));
            }
        }
        let sym = (rest[0] as char).to_string();
        match Element::from_symbol(&sym) {
            Some(el) => {
                self.pos += 1;
                Ok((el, false))
            }
            None => err(start, format!("unknown element '{sym}'")),
        }
    }

    fn finish(self, id: &str) -> MoleculeGraph {
        let n = self.atoms.len();
        let mut degree = vec![0u32; n];
        let mut valence_used = vec![0.0f64; n];
        for b in &self.bonds {
            degree[b.i] += 1;
            degree[b.j] += 1;
            valence_used[b.i] += b.order.weight();
            valence_used[b.j] += b.order.weight();
        }
        let atoms = self
            .atoms
            .into_iter()
            .enumerate()
            .map(|(k, a)| {
                let hydrogens = a.hydrogens.unwrap_or_else(|| {
                    let free = a.element.default_valence() as f64 - valence_used[k];
                    free.max(0.0).floor() as u32
                });
                AtomNode {
                    element: a.element,
                    degree: degree[k],
                    formal_charge: a.charge,
                    aromatic: a.aromatic,
                    hydrogens,
                    in_ring: false,
                    feature: Vec::new(),
                }
            })
            .collect();
        MoleculeGraph::from_parts(id.to_string(), atoms, self.bonds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(g: &MoleculeGraph) -> Vec<(usize, usize, f64)> {
        g.bonds()
            .iter()
            .map(|b| (b.i, b.j, b.order.weight()))
            .collect()
    }

    #[test]
    fn examples() {
        let g = parse_smiles("C").unwrap();
        assert_eq!((g.atom_count(), g.bonds().len()), (1, 0));

        let g = parse_smiles("C=C").unwrap();
        assert_eq!(weights(&g), vec![(0, 1, 2.0)]);

        let g = parse_smiles("CCO").unwrap();
        assert_eq!(weights(&g), vec![(0, 1, 1.0), (1, 2, 1.0)]);

        let g = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(g.atom_count(), 6);
        assert_eq!(g.bonds().len(), 6);
        assert!(g.bonds().iter().all(|b| b.order.weight() == 1.5));
        assert!(g
            .atoms()
            .iter()
            .all(|a| a.degree == 2 && a.in_ring && a.hydrogens == 1));
    }

    #[test]
    fn branches_and_rings() {
        let g = parse_smiles("CC(=O)O").unwrap();
        assert_eq!(weights(&g), vec![(0, 1, 1.0), (1, 2, 2.0), (1, 3, 1.0)]);

        let g = parse_smiles("C1CC%12CC1C%12").unwrap();
        assert_eq!(g.atom_count(), 6);
        assert_eq!(g.bonds().len(), 7);

        let g = parse_smiles("C#N").unwrap();
        assert_eq!(weights(&g), vec![(0, 1, 3.0)]);
        assert_eq!(g.atoms()[0].hydrogens, 1);

        let g = parse_smiles("C=1CCCCC1").unwrap();
        assert!(g
            .bonds()
            .iter()
            .any(|b| (b.i, b.j) == (0, 5) && b.order == BondOrder::Double));
    }

    #[test]
    fn bracket_atoms() {
        let g = parse_smiles("[NH4+]").unwrap();
        let a = &g.atoms()[0];
        assert_eq!(
            (a.element, a.formal_charge, a.hydrogens),
            (Element::N, 1, 4)
        );

        let g = parse_smiles("C[O-]").unwrap();
        assert_eq!(g.atoms()[1].formal_charge, -1);
        assert_eq!(g.atoms()[1].hydrogens, 0);

        let g = parse_smiles("[Fe++]").unwrap();
        assert_eq!(g.atoms()[0].formal_charge, 2);
        assert_eq!(g.atoms()[0].element.symbol(), "Fe");

        let g = parse_smiles("c1cc[nH]c1").unwrap();
        assert_eq!(g.atoms()[3].hydrogens, 1);
        assert!(g.atoms()[3].aromatic);
    }

    #[test]
    fn errors_are_located() {
        let cases = [
            ("CX", 1),
            ("C1CC", 1),
            ("C(C", 1),
            ("CC)", 2),
            ("C.C", 1),
            ("F/C=C/F", 1),
            ("[13C]", 1),
            ("C[C@H](O)N", 3),
            ("[Xx]", 1),
            ("C=", 1),
            ("C()", 2),
            ("=C", 0),
            ("C11", 2),
            ("[CH4", 0),
        ];
        for (s, off) in cases {
            let e = parse_smiles(s).unwrap_err();
            assert_eq!(e.offset, off, "{s}: {e}");
        }
        assert!(parse_smiles("").is_err());
        assert!(parse_smiles("C C").is_err());
        assert!(parse_smiles("CCé").is_err());
    }

    #[test]
    fn ring_flags() {
        let g = parse_smiles("C1CC1CC").unwrap();
        let flags: Vec<bool> = g.atoms().iter().map(|a| a.in_ring).collect();
        assert_eq!(flags, vec![true, true, true, false, false]);
    }
}
