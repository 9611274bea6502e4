//! Two-level label hierarchy: every fine class has exactly one coarse parent.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTree {
    coarse_names: Vec<String>,
    fine_names: Vec<String>,
    parent: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct FineEntry {
    name: String,
    parent: usize,
}

#[derive(Serialize, Deserialize)]
struct TreeDocument {
    coarse: Vec<String>,
    fine: Vec<FineEntry>,
}

impl LabelTree {
    /// Indices are assigned in first-appearance order over `pairs`.
    pub fn build<C: AsRef<str>, F: AsRef<str>>(pairs: &[(C, F)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut coarse_index: HashMap<&str, usize> = HashMap::new();
        let mut fine_index: HashMap<&str, usize> = HashMap::new();
        let mut tree = LabelTree {
            coarse_names: Vec::new(),
            fine_names: Vec::new(),
            parent: Vec::new(),
        };
        for (coarse, fine) in pairs {
            let (coarse, fine) = (coarse.as_ref(), fine.as_ref());
            let c = *coarse_index.entry(coarse).or_insert_with(|| {
                tree.coarse_names.push(coarse.to_string());
                tree.coarse_names.len() - 1
            });
            match fine_index.get(fine) {
                Some(&f) if tree.parent[f] != c => {
                    return Err(Error::ConflictingParent {
                        fine: fine.to_string(),
                        first: tree.coarse_names[tree.parent[f]].clone(),
                        second: coarse.to_string(),
                    });
                }
                Some(_) => {}
                None => {
                    fine_index.insert(fine, tree.fine_names.len());
                    tree.fine_names.push(fine.to_string());
                    tree.parent.push(c);
                }
            }
        }
        Ok(tree)
    }

    pub fn from_parts(coarse_names: Vec<String>, fine_names: Vec<String>, parent: Vec<usize>) -> Result<Self> {
        let tree = LabelTree {
            coarse_names,
            fine_names,
            parent,
        };
        tree.validate()?;
        Ok(tree)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::MalformedDocument(msg));
        if self.coarse_names.is_empty() {
            return bad("empty coarse list".into());
        }
        if self.fine_names.is_empty() {
            return bad("empty fine list".into());
        }
        if self.parent.len() != self.fine_names.len() {
            return bad("parent table length differs from fine list".into());
        }
        let mut children = vec![0usize; self.coarse_names.len()];
        for (f, &p) in self.parent.iter().enumerate() {
            if p >= self.coarse_names.len() {
                return bad(format!(
                    "fine {:?} references unknown coarse index {p}",
                    self.fine_names[f]
                ));
            }
            children[p] += 1;
        }
        if let Some(c) = children.iter().position(|&n| n == 0) {
            return bad(format!("coarse {:?} has no fine child", self.coarse_names[c]));
        }
        Ok(())
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_names.len()
    }

    pub fn num_fine(&self) -> usize {
        self.fine_names.len()
    }

    pub fn coarse_names(&self) -> &[String] {
        &self.coarse_names
    }

    pub fn fine_names(&self) -> &[String] {
        &self.fine_names
    }

    pub fn parent(&self, fine: usize) -> Result<usize> {
        self.parent.get(fine).copied().ok_or(Error::IndexOutOfRange {
            what: "fine classes",
            index: fine,
            len: self.parent.len(),
        })
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    /// True iff the predicted fine class lies outside the true coarse class.
    pub fn is_violation(&self, predicted_fine: usize, true_coarse: usize) -> Result<bool> {
        if true_coarse >= self.num_coarse() {
            return Err(Error::IndexOutOfRange {
                what: "coarse classes",
                index: true_coarse,
                len: self.num_coarse(),
            });
        }
        Ok(self.parent(predicted_fine)? != true_coarse)
    }

    pub fn children(&self, coarse: usize) -> impl Iterator<Item = usize> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter(move |&(_, &p)| p == coarse)
            .map(|(f, _)| f)
    }

    /// Fine classes under a different coarse parent than `fine`.
    pub fn others(&self, fine: usize) -> Result<Vec<usize>> {
        let p = self.parent(fine)?;
        Ok(self
            .parent
            .iter()
            .enumerate()
            .filter(|&(_, &q)| q != p)
            .map(|(f, _)| f)
            .collect())
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let doc = TreeDocument {
            coarse: self.coarse_names.clone(),
            fine: self
                .fine_names
                .iter()
                .zip(&self.parent)
                .map(|(name, &parent)| FineEntry {
                    name: name.clone(),
                    parent,
                })
                .collect(),
        };
        serde_json::to_value(doc).expect("tree document serializes")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let doc: TreeDocument =
            serde_json::from_value(value).map_err(|e| Error::MalformedDocument(format!("label tree: {e}")))?;
        let (fine_names, parent) = doc.fine.into_iter().map(|e| (e.name, e.parent)).unzip();
        Self::from_parts(doc.coarse, fine_names, parent)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("tree document serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::MalformedDocument(format!("label tree: {e}")))?;
        Self::from_json_value(value)
    }
}

impl Serialize for LabelTree {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json_value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LabelTree {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        LabelTree::from_json_value(value).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cars() -> LabelTree {
        LabelTree::build(&[("Audi", "Audi A8"), ("Audi", "Audi A6"), ("Haval", "Haval H3")]).unwrap()
    }

    #[test]
    fn builds_in_first_appearance_order() {
        let t = cars();
        assert_eq!(t.num_coarse(), 2);
        assert_eq!(t.num_fine(), 3);
        assert_eq!(t.parents(), &[0, 0, 1]);
        assert_eq!(t.fine_names()[2], "Haval H3");
    }

    #[test]
    fn singleton_and_duplicates() {
        let t = LabelTree::build(&[("A", "a")]).unwrap();
        assert_eq!(t.parents(), &[0]);
        let t = LabelTree::build(&[("A", "a"), ("A", "a"), ("B", "b")]).unwrap();
        assert_eq!(t.num_fine(), 2);
    }

    #[test]
    fn conflicting_parent_and_empty() {
        assert!(matches!(
            LabelTree::build(&[("A", "x"), ("B", "x")]),
            Err(Error::ConflictingParent { .. })
        ));
        let empty: [(&str, &str); 0] = [];
        assert!(matches!(LabelTree::build(&empty), Err(Error::EmptyInput)));
    }

    #[test]
    fn violation_decisions() {
        let t = cars();
        assert!(!t.is_violation(1, 0).unwrap());
        assert!(t.is_violation(2, 0).unwrap());
        assert!(!t.is_violation(0, 0).unwrap());
        assert!(matches!(t.is_violation(3, 0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(t.is_violation(0, 2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn round_trip_and_malformed_documents() {
        let t = cars();
        assert_eq!(LabelTree::parse(&t.to_json()).unwrap(), t);
        let unknown = r#"{"coarse":["A"],"fine":[{"name":"a","parent":1}]}"#;
        assert!(matches!(LabelTree::parse(unknown), Err(Error::MalformedDocument(_))));
        let empty = r#"{"coarse":[],"fine":[]}"#;
        assert!(matches!(LabelTree::parse(empty), Err(Error::MalformedDocument(_))));
        let childless = r#"{"coarse":["A","B"],"fine":[{"name":"a","parent":0}]}"#;
        assert!(matches!(LabelTree::parse(childless), Err(Error::MalformedDocument(_))));
        assert!(matches!(LabelTree::parse("{"), Err(Error::MalformedDocument(_))));
    }

    fn arb_tree() -> impl Strategy<Value = LabelTree> {
        prop::collection::vec(1usize..4, 1..6).prop_map(|sizes| {
            let pairs: Vec<(String, String)> = sizes
                .iter()
                .enumerate()
                .flat_map(|(c, &n)| (0..n).map(move |f| (format!("c{c}"), format!("c{c}f{f}"))))
                .collect();
            LabelTree::build(&pairs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn own_parent_is_never_a_violation(t in arb_tree()) {
            for f in 0..t.num_fine() {
                prop_assert!(!t.is_violation(f, t.parent(f).unwrap()).unwrap());
            }
        }

        #[test]
        fn siblings_and_others_partition_fine_set(t in arb_tree()) {
            for f in 0..t.num_fine() {
                let siblings: Vec<usize> = t.children(t.parent(f).unwrap()).collect();
                let others = t.others(f).unwrap();
                prop_assert_eq!(siblings.len() + others.len(), t.num_fine());
                let mut all: Vec<usize> = siblings.iter().chain(&others).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..t.num_fine()).collect::<Vec<_>>());
            }
        }

        #[test]
        fn serialization_round_trips(t in arb_tree()) {
            prop_assert_eq!(LabelTree::parse(&t.to_json()).unwrap(), t);
        }
    }
}
