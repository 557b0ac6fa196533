use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::graph::{DistKind, PcgGraph};
use crate::ad::GradMatrix;
use crate::error::{Error, Result};

/// Path enumeration is exponential; refuse graphs larger than this.
pub const MAX_PATH_NODES: usize = 12;

/// A set of intermediate nodes meant to cut every path `source → sink`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockingSet {
    pub members: BTreeSet<usize>,
    pub source: usize,
    pub sink: usize,
}

impl BlockingSet {
    pub fn new(source: usize, sink: usize, members: impl IntoIterator<Item = usize>) -> Self {
        Self {
            members: members.into_iter().collect(),
            source,
            sink,
        }
    }
}

/// Directed paths, each stored as its node sequence `from, …, to`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathSet {
    pub paths: Vec<Vec<usize>>,
    /// Interior nodes excluded during enumeration, if any.
    pub restriction: Option<BTreeSet<usize>>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn contains(&self, path: &[usize]) -> bool {
        self.paths.iter().any(|p| p == path)
    }

    /// Edges of path `k` as `(parent, child)` pairs.
    pub fn edges(&self, k: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.paths[k].windows(2).map(|w| (w[0], w[1]))
    }
}

fn check_node(g: &PcgGraph, n: usize) -> Result<()> {
    if n < g.len() {
        Ok(())
    } else {
        Err(Error::UnknownGraphNode(format!("#{n}")))
    }
}

fn check_size(g: &PcgGraph) -> Result<()> {
    if g.len() > MAX_PATH_NODES {
        Err(Error::GraphTooLarge(g.len(), MAX_PATH_NODES))
    } else {
        Ok(())
    }
}

/// All directed paths `from → to`. With `exclude`, no interior node may be
/// a member; the endpoints are exempt.
pub fn enumerate_paths(g: &PcgGraph, from: usize, to: usize, exclude: Option<&BTreeSet<usize>>) -> Result<PathSet> {
    check_node(g, from)?;
    check_node(g, to)?;
    check_size(g)?;
    let mut out = Vec::new();
    let mut stack = vec![from];
    dfs(g, to, exclude, &mut stack, &mut out);
    Ok(PathSet {
        paths: out,
        restriction: exclude.cloned(),
    })
}

fn dfs(g: &PcgGraph, to: usize, exclude: Option<&BTreeSet<usize>>, stack: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    let here = *stack.last().expect("non-empty stack");
    for &c in g.children(here) {
        if c == to {
            let mut p = stack.clone();
            p.push(c);
            out.push(p);
        } else if !exclude.is_some_and(|ex| ex.contains(&c)) {
            stack.push(c);
            dfs(g, to, exclude, stack, out);
            stack.pop();
        }
    }
}

/// True iff every `source → sink` path has an interior node in the set.
///
/// A direct edge `source → sink` has no interior and is never blocked.
pub fn validate_blocking_set(g: &PcgGraph, set: &BlockingSet) -> Result<bool> {
    check_node(g, set.source)?;
    check_node(g, set.sink)?;
    if set.source == set.sink {
        return Err(Error::InvalidBlockingSet("source and sink coincide".into()));
    }
    // Reachability avoiding members; no enumeration needed.
    let mut seen = vec![false; g.len()];
    let mut stack = vec![set.source];
    while let Some(n) = stack.pop() {
        for &c in g.children(n) {
            if c == set.sink {
                return Ok(false);
            }
            if !seen[c] && !set.members.contains(&c) {
                seen[c] = true;
                stack.push(c);
            }
        }
    }
    Ok(true)
}

/// Edge partials evaluated lazily at a fixed forward pass.
pub struct EdgeJacobians<'g> {
    graph: &'g PcgGraph,
    values: Vec<DVector<f64>>,
    cache: HashMap<(usize, usize), GradMatrix>,
}

impl<'g> EdgeJacobians<'g> {
    pub fn new(graph: &'g PcgGraph) -> Self {
        Self::at(graph, graph.forward(&HashMap::new()))
    }

    pub fn at(graph: &'g PcgGraph, values: Vec<DVector<f64>>) -> Self {
        Self {
            graph,
            values,
            cache: HashMap::new(),
        }
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn edge(&mut self, from: usize, to: usize) -> Result<&GradMatrix> {
        if !self.cache.contains_key(&(from, to)) {
            let e = self.graph.edge_partial(from, to, &self.values)?;
            self.cache.insert((from, to), e);
        }
        Ok(&self.cache[&(from, to)])
    }

    /// Ordered product of edge partials along every path, summed.
    pub fn path_sum(&mut self, paths: &PathSet, from: usize, to: usize) -> Result<GradMatrix> {
        let mut total = DMatrix::zeros(self.graph.nodes()[to].dim(), self.graph.nodes()[from].dim());
        for p in &paths.paths {
            let mut acc = DMatrix::identity(self.graph.nodes()[from].dim(), self.graph.nodes()[from].dim());
            for w in p.windows(2) {
                acc = self.edge(w[0], w[1])? * acc;
            }
            total += acc;
        }
        Ok(total)
    }

    /// `dζ_i/dζ_j` by summing over every path.
    pub fn total(&mut self, j: usize, i: usize) -> Result<GradMatrix> {
        let paths = enumerate_paths(self.graph, j, i, None)?;
        self.path_sum(&paths, j, i)
    }
}

/// `dζ_i/dζ_j` as the sum over paths of ordered edge-partial products,
/// evaluated at the graph's forward pass.
pub fn total_derivative_pathsum(g: &PcgGraph, j: usize, i: usize) -> Result<GradMatrix> {
    check_node(g, j)?;
    check_node(g, i)?;
    EdgeJacobians::new(g).total(j, i)
}

/// One summand `m` of a decomposition. `product()` is always
/// `left * right` in the order the factors compose.
#[derive(Debug, Clone)]
pub struct DecompTerm {
    pub node: usize,
    /// Full total derivative across the unrestricted half.
    pub jump: GradMatrix,
    /// Sum over the restricted half's paths.
    pub path: GradMatrix,
    first_half: bool,
}

impl DecompTerm {
    pub fn product(&self) -> GradMatrix {
        if self.first_half {
            &self.path * &self.jump
        } else {
            &self.jump * &self.path
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub terms: Vec<DecompTerm>,
    pub rows: usize,
    pub cols: usize,
}

impl Decomposition {
    pub fn total(&self) -> GradMatrix {
        let mut t = DMatrix::zeros(self.rows, self.cols);
        for term in &self.terms {
            t += term.product();
        }
        t
    }

    pub fn term(&self, node: usize) -> Option<&DecompTerm> {
        self.terms.iter().find(|t| t.node == node)
    }
}

fn check_decomposable(g: &PcgGraph, set: &BlockingSet) -> Result<()> {
    if set.members.contains(&set.source) || set.members.contains(&set.sink) {
        return Err(Error::InvalidBlockingSet("endpoints may not be members".into()));
    }
    for &m in &set.members {
        check_node(g, m)?;
    }
    if !validate_blocking_set(g, set)? {
        return Err(Error::InvalidBlockingSet(format!(
            "some path {} -> {} avoids the set",
            g.name(set.source),
            g.name(set.sink)
        )));
    }
    check_size(g)
}

/// `dζ_i/dζ_j = Σ_m (dζ_i/dζ_m) · Σ_{r ∈ {j→m}/IN} Π ∂`, where `m` is the
/// first member met along each path.
pub fn decompose_second_half(g: &PcgGraph, set: &BlockingSet) -> Result<Decomposition> {
    check_decomposable(g, set)?;
    let (j, i) = (set.source, set.sink);
    let mut ej = EdgeJacobians::new(g);
    let mut terms = Vec::new();
    for &m in &set.members {
        let restricted = enumerate_paths(g, j, m, Some(&set.members))?;
        if restricted.is_empty() {
            continue;
        }
        let path = ej.path_sum(&restricted, j, m)?;
        let jump = ej.total(m, i)?;
        terms.push(DecompTerm {
            node: m,
            jump,
            path,
            first_half: false,
        });
    }
    Ok(Decomposition {
        terms,
        rows: g.nodes()[i].dim(),
        cols: g.nodes()[j].dim(),
    })
}

/// `dζ_i/dζ_j = Σ_m Σ_{r ∈ {m→i}/IN} Π ∂ · (dζ_m/dζ_j)`, where `m` is the
/// last member met along each path.
pub fn decompose_first_half(g: &PcgGraph, set: &BlockingSet) -> Result<Decomposition> {
    check_decomposable(g, set)?;
    let (j, i) = (set.source, set.sink);
    let mut ej = EdgeJacobians::new(g);
    let mut terms = Vec::new();
    for &m in &set.members {
        let restricted = enumerate_paths(g, m, i, Some(&set.members))?;
        if restricted.is_empty() {
            continue;
        }
        let path = ej.path_sum(&restricted, m, i)?;
        let jump = ej.total(j, m)?;
        terms.push(DecompTerm {
            node: m,
            jump,
            path,
            first_half: true,
        });
    }
    Ok(Decomposition {
        terms,
        rows: g.nodes()[i].dim(),
        cols: g.nodes()[j].dim(),
    })
}

/// The composed map `ζ_j ↦ ζ_i` with every other root held at its value.
pub fn composed_map(g: &PcgGraph, j: usize, i: usize, zeta_j: &[f64]) -> Vec<f64> {
    let mut ov = HashMap::new();
    ov.insert(j, DVector::from_column_slice(zeta_j));
    g.forward(&ov)[i].iter().copied().collect()
}

/// Every subset of the nodes strictly between `j` and `i` (on some path)
/// that blocks all `j → i` paths.
pub fn all_valid_blocking_sets(g: &PcgGraph, j: usize, i: usize) -> Result<Vec<BlockingSet>> {
    let between: Vec<usize> = nodes_between(g, j, i)?.into_iter().collect();
    if between.len() > 16 {
        return Err(Error::GraphTooLarge(between.len(), 16));
    }
    let mut out = Vec::new();
    for mask in 0u32..(1 << between.len()) {
        let members = between.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &n)| n);
        let set = BlockingSet::new(j, i, members);
        if validate_blocking_set(g, &set)? {
            out.push(set);
        }
    }
    Ok(out)
}

/// Nodes lying strictly inside some `j → i` path.
pub fn nodes_between(g: &PcgGraph, j: usize, i: usize) -> Result<BTreeSet<usize>> {
    check_node(g, j)?;
    check_node(g, i)?;
    let down = reach(g.len(), j, |n| g.children(n).to_vec());
    let up = reach(g.len(), i, |n| g.nodes()[n].parents.clone());
    Ok((0..g.len()).filter(|&n| n != j && n != i && down[n] && up[n]).collect())
}

fn reach(n: usize, start: usize, next: impl Fn(usize) -> Vec<usize>) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    while let Some(a) = stack.pop() {
        for b in next(a) {
            if !seen[b] {
                seen[b] = true;
                stack.push(b);
            }
        }
    }
    seen
}

/// Random DAG with small polynomial parameter maps: node `n0` is the root,
/// every later node picks at least one earlier parent, and each component
/// is `c0 + c1·x + c2·x·y` over random parent components.
pub fn random_polynomial_dag<R: Rng>(rng: &mut R, n_nodes: usize, edge_prob: f64) -> PcgGraph {
    assert!(n_nodes >= 2);
    let mut g = PcgGraph::new();
    let mut dims = Vec::with_capacity(n_nodes);
    let root_dim = rng.gen_range(1..=2);
    let root: Vec<String> = (0..root_dim).map(|_| format!("{:.3}", rng.gen_range(-0.8..0.8))).collect();
    let root_refs: Vec<&str> = root.iter().map(String::as_str).collect();
    g.add_node("n0", DistKind::Dirac, &[], &root_refs).expect("root map is valid");
    dims.push(root_dim);
    for k in 1..n_nodes {
        let mut parents: Vec<usize> = (0..k).filter(|_| rng.gen_bool(edge_prob)).collect();
        if parents.is_empty() {
            parents.push(rng.gen_range(0..k));
        }
        let dim = rng.gen_range(1..=2);
        let pick = |rng: &mut R| {
            let p = parents[rng.gen_range(0..parents.len())];
            format!("n{p}[{}]", rng.gen_range(0..dims[p]))
        };
        let mut maps = Vec::with_capacity(dim);
        for _ in 0..dim {
            // every parent appears at least once so each edge carries signal
            let mut terms = vec![format!("{:.3}", rng.gen_range(-0.5..0.5))];
            for &p in &parents {
                let x = format!("n{p}[{}]", rng.gen_range(0..dims[p]));
                terms.push(format!("({:.3})*{x}", rng.gen_range(-1.2..1.2)));
            }
            let (a, b) = (pick(rng), pick(rng));
            terms.push(format!("({:.3})*{a}*{b}", rng.gen_range(-0.6..0.6)));
            maps.push(terms.join(" + "));
        }
        let names: Vec<String> = parents.iter().map(|p| format!("n{p}")).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let map_refs: Vec<&str> = maps.iter().map(String::as_str).collect();
        g.add_node(&format!("n{k}"), DistKind::Dirac, &name_refs, &map_refs)
            .expect("generated map is valid");
        dims.push(dim);
    }
    g
}
