use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::Graph;

/// Ordered contiguous grouping of parameters into communication buckets.
/// The backward pass always mirrors the forward plan.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BucketPlan {
    buckets: Vec<Vec<String>>,
}

impl BucketPlan {
    pub fn new(buckets: Vec<Vec<String>>) -> Self {
        BucketPlan { buckets }
    }

    pub fn singletons<S: AsRef<str>>(params: &[S]) -> Self {
        BucketPlan::new(params.iter().map(|p| vec![p.as_ref().to_string()]).collect())
    }

    pub fn single_bucket<S: AsRef<str>>(params: &[S]) -> Self {
        BucketPlan::new(vec![params.iter().map(|p| p.as_ref().to_string()).collect()])
    }

    /// Cuts `params` into consecutive buckets of the given sizes.
    pub fn from_sizes<S: AsRef<str>>(params: &[S], sizes: &[usize]) -> Self {
        let mut at = 0;
        let buckets = sizes
            .iter()
            .map(|&n| {
                let b = params[at..at + n].iter().map(|p| p.as_ref().to_string()).collect();
                at += n;
                b
            })
            .collect();
        BucketPlan::new(buckets)
    }

    pub fn buckets(&self) -> &[Vec<String>] {
        &self.buckets
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.buckets.iter().map(Vec::len).collect()
    }

    pub fn is_all_singletons(&self) -> bool {
        self.buckets.iter().all(|b| b.len() == 1)
    }

    /// Checks that the buckets, concatenated, are exactly `order`.
    pub fn check_partition<S: AsRef<str>>(&self, order: &[S]) -> Result<()> {
        if let Some(i) = self.buckets.iter().position(Vec::is_empty) {
            return Err(Error::Plan(format!("bucket {i} is empty")));
        }
        let flat: Vec<&str> = self.buckets.iter().flatten().map(String::as_str).collect();
        let want: Vec<&str> = order.iter().map(AsRef::as_ref).collect();
        if flat != want {
            let at = flat.iter().zip(&want).position(|(a, b)| a != b);
            return Err(Error::Plan(match at {
                Some(i) => format!(
                    "plan is not a contiguous partition of the parameters: position {i} holds `{}`, expected `{}`",
                    flat[i], want[i]
                ),
                None => format!("plan covers {} parameters, the graph has {}", flat.len(), want.len()),
            }));
        }
        Ok(())
    }

    /// One bucket per line, parameter names separated by spaces.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for b in &self.buckets {
            writeln!(s, "{}", b.join(" ")).unwrap();
        }
        s
    }

    /// Inverse of [`BucketPlan::to_text`]; blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let buckets = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect();
        Ok(BucketPlan::new(buckets))
    }
}

fn path_matches(name: &str, path: &str, root: &str) -> bool {
    name == root
        || path == name
        || (path.len() > name.len() && path.starts_with(name) && path.as_bytes()[name.len()] == b'.')
}

/// One bucket per listed module (all parameters whose module path is the
/// name or lies under it), every other parameter alone. The model's name
/// addresses the root module.
pub fn manual_plan<S: AsRef<str>>(graph: &Graph, module_names: &[S]) -> Result<BucketPlan> {
    let root = graph.model_name();
    let names: Vec<&str> = module_names.iter().map(AsRef::as_ref).collect();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            if path_matches(a, b, root) || path_matches(b, a, root) {
                return Err(Error::Plan(format!("module names `{a}` and `{b}` overlap")));
            }
        }
        if !graph.nodes().any(|n| path_matches(a, &n.module_path, root)) {
            return Err(Error::Plan(format!("unknown module `{a}`")));
        }
    }

    let mut buckets: Vec<Vec<String>> = Vec::new();
    let mut opened: BTreeMap<usize, usize> = BTreeMap::new();
    let mut current: Option<usize> = None;
    for p in graph.params() {
        let owner = names.iter().position(|n| path_matches(n, &p.module, root));
        match owner {
            Some(o) if current == Some(o) => buckets.last_mut().unwrap().push(p.name.clone()),
            Some(o) => {
                if opened.insert(o, buckets.len()).is_some() {
                    return Err(Error::Plan(format!(
                        "parameters of `{}` are not contiguous in execution order (at `{}`)",
                        names[o], p.name
                    )));
                }
                buckets.push(vec![p.name.clone()]);
                current = Some(o);
            }
            None => {
                buckets.push(vec![p.name.clone()]);
                current = None;
            }
        }
    }
    Ok(BucketPlan::new(buckets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let plan = BucketPlan::new(vec![vec!["a".into(), "b".into()], vec!["c".into()]]);
        assert_eq!(plan.to_text(), "a b\nc\n");
        assert_eq!(BucketPlan::parse("# plan\na b\n\nc # tail\n").unwrap(), plan);
    }

    #[test]
    fn partition_checks() {
        let order = ["a", "b", "c"];
        assert!(BucketPlan::from_sizes(&order, &[2, 1]).check_partition(&order).is_ok());
        let swapped = BucketPlan::new(vec![vec!["b".into()], vec!["a".into(), "c".into()]]);
        assert!(swapped.check_partition(&order).is_err());
        assert!(BucketPlan::singletons(&["a", "b"]).check_partition(&order).is_err());
        let empty = BucketPlan::new(vec![vec![], vec!["a".into(), "b".into(), "c".into()]]);
        assert!(empty.check_partition(&order).is_err());
    }

    #[test]
    fn prefix_matching_respects_components() {
        assert!(path_matches("layers.1", "layers.1.attention", "m"));
        assert!(!path_matches("layers.1", "layers.10.attention", "m"));
        assert!(path_matches("m", "anything", "m"));
    }
}
