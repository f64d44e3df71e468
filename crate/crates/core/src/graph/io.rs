use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Graph;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Bookkeeping from a load: what was read and what was discarded.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub n_nodes: usize,
    pub edge_rows: usize,
    pub undirected_edges: usize,
    /// Edge rows naming a node id absent from the content file.
    pub dropped_unknown: usize,
    pub dropped_self_loops: usize,
    /// Edge rows that repeat an already seen undirected pair.
    pub duplicate_pairs: usize,
}

/// Loads a Planetoid-style citation graph (`.content` and `.cites`).
pub fn load_planetoid(content_path: &Path, cites_path: &Path) -> Result<(Graph, LoadReport)> {
    load(content_path, cites_path, false)
}

/// Loads a WebKB graph. Same format as Planetoid, but an empty edge file
/// is accepted.
pub fn load_webkb(node_path: &Path, edge_path: &Path) -> Result<(Graph, LoadReport)> {
    load(node_path, edge_path, true)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn load(content_path: &Path, edge_path: &Path, allow_empty_edges: bool) -> Result<(Graph, LoadReport)> {
    let content = read(content_path)?;
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut data: Vec<f64> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut width: Option<usize> = None;
    for (ln, line) in content.lines().enumerate() {
        let ln = ln + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 3 {
            return Err(parse_err(
                content_path,
                ln,
                format!("expected `id feature... label`, found {} fields", fields.len()),
            ));
        }
        let w = *width.get_or_insert(fields.len());
        if fields.len() != w {
            return Err(parse_err(
                content_path,
                ln,
                format!("row has {} fields, earlier rows have {w}", fields.len()),
            ));
        }
        let id = fields[0].to_string();
        if index.contains_key(&id) {
            return Err(parse_err(content_path, ln, format!("duplicate node id `{id}`")));
        }
        for tok in &fields[1..w - 1] {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(content_path, ln, format!("feature `{tok}` is not a number")))?;
            data.push(v);
        }
        index.insert(id.clone(), ids.len());
        ids.push(id);
        raw_labels.push(fields[w - 1].to_string());
    }
    let Some(width) = width else {
        return Err(Error::EmptyFile(content_path.to_path_buf()));
    };
    let n = ids.len();
    let features = Tensor::from_vec(n, width - 2, data)?;
    let (labels, class_names) = map_labels(&raw_labels);

    let edges = read(edge_path)?;
    let mut report = LoadReport {
        n_nodes: n,
        ..LoadReport::default()
    };
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut pairs = Vec::new();
    for (ln, line) in edges.lines().enumerate() {
        let ln = ln + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 2 {
            return Err(parse_err(
                edge_path,
                ln,
                format!("expected `cited citing`, found {} fields", fields.len()),
            ));
        }
        report.edge_rows += 1;
        let (Some(&a), Some(&b)) = (index.get(fields[0]), index.get(fields[1])) else {
            report.dropped_unknown += 1;
            continue;
        };
        if a == b {
            report.dropped_self_loops += 1;
            continue;
        }
        if !seen.insert((a.min(b), a.max(b))) {
            report.duplicate_pairs += 1;
            continue;
        }
        pairs.push((a, b));
    }
    if report.edge_rows == 0 && !allow_empty_edges {
        return Err(Error::EmptyFile(edge_path.to_path_buf()));
    }
    if report.dropped_unknown > 0 {
        log::warn!(
            "{}: dropped {} edge rows naming unknown node ids",
            edge_path.display(),
            report.dropped_unknown
        );
    }
    let g = Graph::with_names(features, labels, class_names, ids, &pairs)?;
    report.undirected_edges = g.n_edges();
    Ok((g, report))
}

/// Integer label names are ordered numerically, anything else
/// lexicographically.
fn map_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let distinct: BTreeSet<&str> = raw.iter().map(String::as_str).collect();
    let mut names: Vec<&str> = distinct.into_iter().collect();
    if names.iter().all(|s| s.parse::<i64>().is_ok()) {
        names.sort_by_key(|s| s.parse::<i64>().unwrap());
    }
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let labels = raw.iter().map(|s| index[s.as_str()]).collect();
    (labels, names.into_iter().map(String::from).collect())
}

/// Writes `g` in the two-file Planetoid format. Loading the files back
/// yields an identical graph as long as every class has a member.
pub fn write_planetoid(g: &Graph, content_path: &Path, cites_path: &Path) -> Result<()> {
    let bad_token = |s: &str| s.is_empty() || s.chars().any(char::is_whitespace);
    if let Some(id) = g.node_ids().iter().find(|s| bad_token(s)) {
        return Err(Error::invalid(format!("node id `{id}` cannot be written as a single token")));
    }
    if let Some(c) = g.class_names().iter().find(|s| bad_token(s)) {
        return Err(Error::invalid(format!("class name `{c}` cannot be written as a single token")));
    }
    let mut out = String::new();
    for i in 0..g.n_nodes() {
        out.push_str(&g.node_ids()[i]);
        for v in g.features().row(i) {
            write!(out, "\t{v}").unwrap();
        }
        writeln!(out, "\t{}", g.class_names()[g.labels()[i]]).unwrap();
    }
    fs::write(content_path, out).map_err(|e| Error::io(content_path, e))?;
    let mut out = String::new();
    for (i, j) in g.edges() {
        writeln!(out, "{}\t{}", g.node_ids()[j], g.node_ids()[i]).unwrap();
    }
    fs::write(cites_path, out).map_err(|e| Error::io(cites_path, e))
}
