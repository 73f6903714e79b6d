//! Graph container files.
//!
//! A container is a single text file. Its first line is a JSON header
//! (`format`, `version`, `n`, `d`, `num_classes`, `has_labels`), followed by the
//! entries `@edges` (two node ids per line), `@features` (`n` lines of `d`
//! reals) and, when labeled, `@labels` (`n` integers). All values are
//! whitespace-separated; blank lines and lines starting with `#` are ignored.
//!
//! The `dir` format holds the same entries as `header.json`, `edges.txt`,
//! `features.txt` and `labels.txt` inside a directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "graft-graph";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphFormat {
    Container,
    Directory,
}

impl FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "container" | "graph" => Ok(GraphFormat::Container),
            "dir" | "directory" => Ok(GraphFormat::Directory),
            other => Err(Error::contract(format!("unknown graph format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphHeader {
    pub format: String,
    pub version: u32,
    pub n: usize,
    pub d: usize,
    pub num_classes: usize,
    pub has_labels: bool,
}

impl GraphHeader {
    fn of(g: &Graph) -> Self {
        GraphHeader {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            n: g.node_count(),
            d: g.feature_dim(),
            num_classes: g.num_classes(),
            has_labels: g.labels().is_some(),
        }
    }
}

pub fn save_graph(g: &Graph, path: &Path, format: GraphFormat) -> Result<()> {
    let header = serde_json::to_string(&GraphHeader::of(g))?;
    let mut edges = String::new();
    for &(a, b) in g.edges() {
        writeln!(edges, "{a} {b}").unwrap();
    }
    let mut features = String::new();
    for row in g.features().rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(features, "{}", line.join(" ")).unwrap();
    }
    let labels = g.labels().map(|ys| {
        let mut s = String::new();
        for y in ys {
            writeln!(s, "{y}").unwrap();
        }
        s
    });
    match format {
        GraphFormat::Container => {
            let mut out = String::new();
            writeln!(out, "{header}").unwrap();
            out.push_str("@edges\n");
            out.push_str(&edges);
            out.push_str("@features\n");
            out.push_str(&features);
            if let Some(labels) = labels {
                out.push_str("@labels\n");
                out.push_str(&labels);
            }
            fs::write(path, out)?;
        }
        GraphFormat::Directory => {
            fs::create_dir_all(path)?;
            fs::write(path.join("header.json"), header)?;
            fs::write(path.join("edges.txt"), edges)?;
            fs::write(path.join("features.txt"), features)?;
            if let Some(labels) = labels {
                fs::write(path.join("labels.txt"), labels)?;
            }
        }
    }
    Ok(())
}

/// Lines of one entry, tagged with their 1-based line number in `path`.
struct Section<'a> {
    path: PathBuf,
    lines: Vec<(usize, &'a str)>,
}

impl Section<'_> {
    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse { path: self.path.clone(), line, message: message.into() }
    }

    fn rows<T: FromStr>(&self, width: Option<usize>) -> Result<Vec<(usize, Vec<T>)>> {
        let mut out = Vec::with_capacity(self.lines.len());
        for &(no, line) in &self.lines {
            let mut vals = Vec::new();
            for tok in line.split_whitespace() {
                vals.push(tok.parse::<T>().map_err(|_| self.err(no, format!("cannot parse `{tok}`")))?);
            }
            if let Some(w) = width {
                if vals.len() != w {
                    return Err(Error::Schema(format!(
                        "{}:{no}: expected {w} values, found {}",
                        self.path.display(),
                        vals.len()
                    )));
                }
            }
            out.push((no, vals));
        }
        Ok(out)
    }
}

fn content_lines(text: &str, offset: usize) -> Vec<(usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1 + offset, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

pub fn load_graph(path: &Path, format: GraphFormat) -> Result<Graph> {
    match format {
        GraphFormat::Container => {
            let text = fs::read_to_string(path)?;
            let mut lines = content_lines(&text, 0).into_iter();
            let (hline, htext) = lines.next().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "empty file".into(),
            })?;
            let header = parse_header(path, hline, htext)?;
            let mut sections: Vec<(String, Section)> = Vec::new();
            for (no, line) in lines {
                if let Some(name) = line.strip_prefix('@') {
                    sections.push((name.trim().to_string(), Section { path: path.to_path_buf(), lines: Vec::new() }));
                } else if let Some((_, s)) = sections.last_mut() {
                    s.lines.push((no, line));
                } else {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: no,
                        message: "data before the first `@entry` marker".into(),
                    });
                }
            }
            let take = |name: &str| sections.iter().position(|(n, _)| n == name).map(|i| &sections[i].1);
            let missing = |name: &str| Error::Schema(format!("{}: missing `@{name}` entry", path.display()));
            let edges = take("edges").ok_or_else(|| missing("edges"))?;
            let features = take("features").ok_or_else(|| missing("features"))?;
            let labels = if header.has_labels { Some(take("labels").ok_or_else(|| missing("labels"))?) } else { None };
            assemble(&header, edges, features, labels)
        }
        GraphFormat::Directory => {
            let read = |name: &str| -> Result<String> { Ok(fs::read_to_string(path.join(name))?) };
            let htext = read("header.json")?;
            let header = parse_header(&path.join("header.json"), 1, htext.trim())?;
            let etext = read("edges.txt")?;
            let ftext = read("features.txt")?;
            let ltext = if header.has_labels { Some(read("labels.txt")?) } else { None };
            let edges = Section { path: path.join("edges.txt"), lines: content_lines(&etext, 0) };
            let features = Section { path: path.join("features.txt"), lines: content_lines(&ftext, 0) };
            let labels = ltext
                .as_deref()
                .map(|t| Section { path: path.join("labels.txt"), lines: content_lines(t, 0) });
            assemble(&header, &edges, &features, labels.as_ref())
        }
    }
}

fn parse_header(path: &Path, line: usize, text: &str) -> Result<GraphHeader> {
    let header: GraphHeader = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid header: {e}"),
    })?;
    if header.format != FORMAT_NAME {
        return Err(Error::Schema(format!("unexpected format tag `{}`", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Schema(format!("unsupported format version {}", header.version)));
    }
    Ok(header)
}

fn assemble(header: &GraphHeader, edges: &Section, features: &Section, labels: Option<&Section>) -> Result<Graph> {
    let edge_rows: Vec<(usize, Vec<usize>)> = edges.rows(Some(2))?;
    for (no, e) in &edge_rows {
        if e[0] >= header.n || e[1] >= header.n {
            return Err(edges.err(*no, format!("edge ({}, {}) outside {} nodes", e[0], e[1], header.n)));
        }
    }
    let feat_rows: Vec<(usize, Vec<f64>)> = features.rows(Some(header.d))?;
    if feat_rows.len() != header.n {
        return Err(Error::Schema(format!(
            "{}: {} feature rows for n = {}",
            features.path.display(),
            feat_rows.len(),
            header.n
        )));
    }
    let mut x = Array2::zeros((header.n, header.d));
    for (i, (_, row)) in feat_rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            x[[i, j]] = *v;
        }
    }
    let ys = match labels {
        Some(sec) => {
            let rows: Vec<(usize, Vec<usize>)> = sec.rows(Some(1))?;
            if rows.len() != header.n {
                return Err(Error::Schema(format!("{} labels for n = {}", rows.len(), header.n)));
            }
            for (no, r) in &rows {
                if r[0] >= header.num_classes {
                    return Err(sec.err(*no, format!("label {} outside [0, {})", r[0], header.num_classes)));
                }
            }
            Some(rows.into_iter().map(|(_, r)| r[0]).collect())
        }
        None => None,
    };
    Graph::new(header.n, edge_rows.into_iter().map(|(_, e)| (e[0], e[1])), x, ys, header.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn minimal_container() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.graph");
        fs::write(
            &p,
            "{\"format\":\"graft-graph\",\"version\":1,\"n\":2,\"d\":1,\"num_classes\":2,\"has_labels\":false}\n@edges\n0 1\n1 0\n@features\n1.0\n3.0\n",
        )
        .unwrap();
        let g = load_graph(&p, GraphFormat::Container).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.features(), &array![[1.0], [3.0]]);
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.graph");
        fs::write(
            &p,
            "{\"format\":\"graft-graph\",\"version\":1,\"n\":2,\"d\":1,\"num_classes\":1,\"has_labels\":false}\n@edges\n0 x\n@features\n1\n2\n",
        )
        .unwrap();
        match load_graph(&p, GraphFormat::Container) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn feature_width_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.graph");
        fs::write(
            &p,
            "{\"format\":\"graft-graph\",\"version\":1,\"n\":2,\"d\":2,\"num_classes\":1,\"has_labels\":false}\n@edges\n@features\n1 2\n3\n",
        )
        .unwrap();
        assert!(matches!(load_graph(&p, GraphFormat::Container), Err(Error::Schema(_))));
    }

    #[test]
    fn round_trip_both_formats() {
        let x = array![[0.1, -2.5], [1.0 / 3.0, 4.0], [5.5, 1e-9]];
        let g = Graph::new(3, [(0, 2), (1, 2)], x, Some(vec![1, 0, 1]), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (fmt, name) in [(GraphFormat::Container, "g.graph"), (GraphFormat::Directory, "gdir")] {
            let p = dir.path().join(name);
            save_graph(&g, &p, fmt).unwrap();
            assert_eq!(load_graph(&p, fmt).unwrap(), g);
        }
    }
}
