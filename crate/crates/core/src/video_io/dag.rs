use petgraph::algo::{tarjan_scc, toposort};
use petgraph::graph::{DiGraph, NodeIndex};

use crate::error::{Error, Result};

/// Layers needed so that every occluder sits in front of what it occludes:
/// the vertex count of the longest directed path. Isolated nodes count, so
/// any non-empty graph needs at least one layer.
pub fn min_layers_for_dag(num_nodes: usize, edges: &[(usize, usize)]) -> Result<usize> {
    let labels: Vec<String> = (0..num_nodes).map(|i| i.to_string()).collect();
    longest_path(&labels, edges)
}

/// Same as [`min_layers_for_dag`] with named nodes; nodes are taken from the
/// edges plus `isolated`.
pub fn min_layers_for_labeled(isolated: &[&str], edges: &[(&str, &str)]) -> Result<usize> {
    let mut labels: Vec<String> = Vec::new();
    let index = |name: &str, labels: &mut Vec<String>| match labels.iter().position(|l| l == name) {
        Some(i) => i,
        None => {
            labels.push(name.to_string());
            labels.len() - 1
        }
    };
    let idx_edges: Vec<(usize, usize)> =
        edges.iter().map(|(a, b)| (index(a, &mut labels), index(b, &mut labels))).collect();
    for n in isolated {
        index(n, &mut labels);
    }
    longest_path(&labels, &idx_edges)
}

fn longest_path(labels: &[String], edges: &[(usize, usize)]) -> Result<usize> {
    let mut g: DiGraph<(), ()> = DiGraph::new();
    let nodes: Vec<NodeIndex> = labels.iter().map(|_| g.add_node(())).collect();
    for &(a, b) in edges {
        if a >= nodes.len() || b >= nodes.len() {
            return Err(Error::invalid(format!("edge ({}, {}) names a node outside 0..{}", a, b, nodes.len())));
        }
        g.add_edge(nodes[a], nodes[b], ());
    }
    let order = match toposort(&g, None) {
        Ok(order) => order,
        Err(_) => return Err(Error::Cycle(find_cycle(&g, labels))),
    };
    let mut depth = vec![1usize; nodes.len()];
    for n in order {
        for m in g.neighbors(n) {
            depth[m.index()] = depth[m.index()].max(depth[n.index()] + 1);
        }
    }
    Ok(depth.into_iter().max().unwrap_or(0))
}

/// One directed cycle, as node labels with the first repeated at the end.
fn find_cycle(g: &DiGraph<(), ()>, labels: &[String]) -> Vec<String> {
    for scc in tarjan_scc(g) {
        let self_loop = scc.len() == 1 && g.contains_edge(scc[0], scc[0]);
        if scc.len() < 2 && !self_loop {
            continue;
        }
        // Walk inside the component until a node repeats.
        let start = scc[0];
        let mut path = vec![start];
        let mut cur = start;
        loop {
            let next = g.neighbors(cur).find(|n| scc.contains(n)).expect("strongly connected");
            if let Some(pos) = path.iter().position(|&p| p == next) {
                let mut cycle: Vec<String> = path[pos..].iter().map(|n| labels[n.index()].clone()).collect();
                cycle.push(labels[next.index()].clone());
                return cycle;
            }
            path.push(next);
            cur = next;
        }
    }
    Vec::new()
}
