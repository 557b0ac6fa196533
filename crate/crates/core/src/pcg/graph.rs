use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::expr::{parse_expr, Expr};
use crate::ad::{GradMatrix, NodeId, Tape};
use crate::error::{Error, Result};

/// Distribution family carried by a node. Parameters are flat vectors:
/// mean followed by the column-major covariance for Gaussians, the point
/// value for Dirac nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistKind {
    Gaussian,
    Dirac,
}

#[derive(Debug, Clone)]
pub struct PcgNode {
    pub name: String,
    pub kind: DistKind,
    pub parents: Vec<usize>,
    /// One scalar expression per parameter component.
    pub map: Vec<Expr>,
    /// Edge partials into this node cannot be evaluated.
    pub intractable: bool,
}

impl PcgNode {
    pub fn dim(&self) -> usize {
        self.map.len()
    }
}

/// Probabilistic computation graph over distribution parameters.
///
/// Nodes are stored in a topological order; `ζ_i = f(Pz_i)` is the node's
/// `map`, evaluated on its parents' parameters.
#[derive(Debug, Clone, Default)]
pub struct PcgGraph {
    nodes: Vec<PcgNode>,
    index: HashMap<String, usize>,
    children: Vec<Vec<usize>>,
}

impl PcgGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a node. Parents must already exist, which keeps the graph acyclic.
    pub fn add_node(&mut self, name: &str, kind: DistKind, parents: &[&str], map: &[&str]) -> Result<usize> {
        let map = map
            .iter()
            .map(|m| parse_expr(m).map_err(|msg| Error::Parse { line: 0, msg }))
            .collect::<Result<Vec<_>>>()?;
        let parents = parents.iter().map(|p| self.node(p)).collect::<Result<Vec<_>>>()?;
        self.push(PcgNode {
            name: name.to_string(),
            kind,
            parents,
            map,
            intractable: false,
        })
    }

    fn push(&mut self, node: PcgNode) -> Result<usize> {
        if self.index.contains_key(&node.name) {
            return Err(Error::Parse {
                line: 0,
                msg: format!("duplicate node `{}`", node.name),
            });
        }
        let mut refs = Vec::new();
        for e in &node.map {
            e.vars(&mut refs);
        }
        for (r, k) in refs {
            let Some(&p) = self.index.get(&r) else {
                return Err(Error::UnknownGraphNode(r));
            };
            if !node.parents.contains(&p) {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("`{}` uses `{r}` which is not a parent", node.name),
                });
            }
            if k >= self.nodes[p].dim() {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("`{r}[{k}]` out of range in `{}`", node.name),
                });
            }
        }
        let id = self.nodes.len();
        for &p in &node.parents {
            self.children[p].push(id);
        }
        self.index.insert(node.name.clone(), id);
        self.nodes.push(node);
        self.children.push(Vec::new());
        Ok(id)
    }

    pub fn set_intractable(&mut self, node: usize, flag: bool) {
        self.nodes[node].intractable = flag;
    }

    pub fn node(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownGraphNode(name.to_string()))
    }

    pub fn nodes(&self) -> &[PcgNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.nodes[id].name
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.children[from].contains(&to)
    }

    /// Parameters of every node, with `overrides` pinning chosen nodes.
    pub fn forward(&self, overrides: &HashMap<usize, DVector<f64>>) -> Vec<DVector<f64>> {
        let mut vals: Vec<DVector<f64>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(v) = overrides.get(&id) {
                vals.push(v.clone());
                continue;
            }
            let lookup = |n: &str, k: usize| self.index.get(n).map(|&p| vals[p][k]);
            let v = node
                .map
                .iter()
                .map(|e| e.eval(&lookup).expect("references validated on insert"))
                .collect::<Vec<_>>();
            vals.push(DVector::from_vec(v));
        }
        vals
    }

    /// `∂ζ_to / ∂ζ_from` for a direct edge, evaluated at `values`.
    pub fn edge_partial(&self, from: usize, to: usize, values: &[DVector<f64>]) -> Result<GradMatrix> {
        let node = &self.nodes[to];
        if !node.parents.contains(&from) {
            return Err(Error::Parse {
                line: 0,
                msg: format!("no edge {} -> {}", self.name(from), node.name),
            });
        }
        if node.intractable {
            return Err(Error::Intractable(node.name.clone()));
        }
        let mut tape = Tape::new();
        let mut inputs: HashMap<usize, Vec<NodeId>> = HashMap::new();
        for &p in &node.parents {
            let ids = values[p].iter().map(|&x| tape.input_scalar(x)).collect();
            inputs.insert(p, ids);
        }
        let lookup = |n: &str, k: usize| self.index.get(n).and_then(|p| inputs.get(p)).map(|v| v[k]);
        let comps = node
            .map
            .iter()
            .map(|e| e.record(&mut tape, &lookup).expect("references validated on insert"))
            .collect::<Vec<_>>();
        let mut jac = DMatrix::zeros(node.dim(), self.nodes[from].dim());
        let src = &inputs[&from];
        for (r, c) in comps.iter().enumerate() {
            let adj = tape.grad(*c)?;
            for (k, id) in src.iter().enumerate() {
                if let Some(Some(a)) = adj.get(id.index()) {
                    jac[(r, k)] = a[0];
                }
            }
        }
        Ok(jac)
    }

    /// Parse the line-oriented text format:
    ///
    /// ```text
    /// # comment
    /// node <id> <gaussian|dirac> parents=<a,b,...> [intractable] map=<expr>;<expr>;...
    /// ```
    ///
    /// Lines may appear in any order; the result is topologically sorted.
    pub fn parse(src: &str) -> Result<Self> {
        struct Raw {
            line: usize,
            name: String,
            kind: DistKind,
            parents: Vec<String>,
            intractable: bool,
            map: Vec<Expr>,
        }
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        let mut raws = Vec::new();
        for (ln, line) in src.lines().enumerate() {
            let line_no = ln + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (head, map_src) = match line.find("map=") {
                Some(p) => (&line[..p], &line[p + 4..]),
                None => return Err(perr(line_no, "missing `map=`".into())),
            };
            let mut toks = head.split_whitespace();
            if toks.next() != Some("node") {
                return Err(perr(line_no, "line must start with `node`".into()));
            }
            let name = toks.next().ok_or_else(|| perr(line_no, "missing node id".into()))?;
            let kind = match toks.next() {
                Some("gaussian") => DistKind::Gaussian,
                Some("dirac") => DistKind::Dirac,
                other => return Err(perr(line_no, format!("unknown kind {other:?}"))),
            };
            let mut parents = Vec::new();
            let mut intractable = false;
            for t in toks {
                if let Some(ps) = t.strip_prefix("parents=") {
                    parents = ps.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
                } else if t == "intractable" {
                    intractable = true;
                } else {
                    return Err(perr(line_no, format!("unexpected token `{t}`")));
                }
            }
            let map = map_src
                .split(';')
                .map(|s| parse_expr(s).map_err(|m| perr(line_no, m)))
                .collect::<Result<Vec<_>>>()?;
            raws.push(Raw {
                line: line_no,
                name: name.to_string(),
                kind,
                parents,
                intractable,
                map,
            });
        }

        // Kahn's algorithm, stable in input order.
        let pos: HashMap<&str, usize> = raws.iter().enumerate().map(|(i, r)| (r.name.as_str(), i)).collect();
        for r in &raws {
            for p in &r.parents {
                if !pos.contains_key(p.as_str()) {
                    return Err(Error::UnknownGraphNode(p.clone()));
                }
            }
        }
        let mut placed = vec![false; raws.len()];
        let mut g = PcgGraph::new();
        while g.len() < raws.len() {
            let next = raws
                .iter()
                .enumerate()
                .find(|(i, r)| !placed[*i] && r.parents.iter().all(|p| g.index.contains_key(p)));
            let Some((i, r)) = next else {
                let stuck = raws.iter().enumerate().find(|(i, _)| !placed[*i]).map(|(_, r)| r.name.clone());
                return Err(Error::Cyclic(stuck.unwrap_or_default()));
            };
            placed[i] = true;
            let parents = r.parents.iter().map(|p| g.index[p]).collect();
            g.push(PcgNode {
                name: r.name.clone(),
                kind: r.kind,
                parents,
                map: r.map.clone(),
                intractable: r.intractable,
            })
            .map_err(|e| match e {
                Error::Parse { msg, .. } => perr(r.line, msg),
                other => other,
            })?;
        }
        Ok(g)
    }

    /// Render back to the text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let parents: Vec<&str> = n.parents.iter().map(|&p| self.name(p)).collect();
            let kind = match n.kind {
                DistKind::Gaussian => "gaussian",
                DistKind::Dirac => "dirac",
            };
            let map: Vec<String> = n.map.iter().map(|e| e.to_string()).collect();
            let flag = if n.intractable { " intractable" } else { "" };
            let _ = writeln!(s, "node {} {kind} parents={}{flag} map={}", n.name, parents.join(","), map.join(";"));
        }
        s
    }
}
