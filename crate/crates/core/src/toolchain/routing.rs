use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::circuit::{Gate, GateKind, HardwareTarget, QuantumCircuit};
use crate::sim::LAYOUT_KEY;

use super::PassError;

/// Shortest path from `from` to `to`, visiting neighbours in ascending index
/// order so ties resolve toward the lower qubit.
pub fn shortest_path(t: &HardwareTarget, from: usize, to: usize) -> Option<Vec<usize>> {
    let n = t.num_qubits();
    let mut parent = vec![usize::MAX; n];
    let mut queue = VecDeque::from([from]);
    parent[from] = from;
    while let Some(q) = queue.pop_front() {
        if q == to {
            let mut path = vec![to];
            let mut cur = to;
            while cur != from {
                cur = parent[cur];
                path.push(cur);
            }
            path.reverse();
            return Some(path);
        }
        for nb in t.neighbors(q) {
            if parent[nb] == usize::MAX {
                parent[nb] = q;
                queue.push_back(nb);
            }
        }
    }
    None
}

/// Parses the `layout` metadata entry. Absent means the identity.
pub fn read_layout(c: &QuantumCircuit) -> Result<Vec<usize>, PassError> {
    match c.metadata.get(LAYOUT_KEY) {
        None => Ok((0..c.num_qubits()).collect()),
        Some(text) => text
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| PassError::BadOption(alloc::format!("unreadable layout {text:?}"))),
    }
}

pub fn format_layout(layout: &[usize]) -> String {
    let mut s = String::new();
    for (i, p) in layout.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&alloc::format!("{p}"));
    }
    s
}

/// Greedy SWAP insertion. Each non-adjacent two-qubit gate moves its first
/// operand along the shortest path toward the second. The final placement
/// of logical qubit `i` is written to the `layout` metadata entry whenever it
/// differs from the identity; the register widens only if a path crosses a
/// physical qubit beyond the circuit's own width.
pub fn route_connectivity(c: &QuantumCircuit, t: &HardwareTarget) -> Result<QuantumCircuit, PassError> {
    if !t.is_connected() {
        return Err(PassError::DisconnectedTarget);
    }
    if c.num_qubits() > t.num_qubits() {
        return Err(PassError::TooManyQubits {
            circuit: c.num_qubits(),
            target: t.num_qubits(),
        });
    }
    let n_phys = t.num_qubits();
    // where each input-space index currently sits, and the inverse
    let mut l2p: Vec<usize> = (0..n_phys).collect();
    let mut p2l: Vec<usize> = (0..n_phys).collect();
    let mut out: Vec<Gate> = Vec::with_capacity(c.len());
    let mut width = c.num_qubits();
    let swap_native = t.is_native(GateKind::Swap);

    for g in c.gates() {
        if !g.kind().is_two_qubit() {
            out.push(g.remapped(|q| l2p[q]));
            continue;
        }
        let (pa, pb) = (l2p[g.qubits()[0]], l2p[g.qubits()[1]]);
        if !t.are_adjacent(pa, pb) {
            let path = shortest_path(t, pa, pb).ok_or(PassError::DisconnectedTarget)?;
            for w in path[..path.len() - 1].windows(2) {
                let (x, y) = (w[0], w[1]);
                width = width.max(x + 1).max(y + 1);
                if swap_native {
                    out.push(Gate::swap(x, y));
                } else {
                    out.extend([Gate::cx(x, y), Gate::cx(y, x), Gate::cx(x, y)]);
                }
                let (lx, ly) = (p2l[x], p2l[y]);
                p2l.swap(x, y);
                l2p[lx] = y;
                l2p[ly] = x;
            }
        }
        out.push(g.remapped(|q| l2p[q]));
    }

    let mut routed = c.empty_like();
    routed.widen(width);
    for g in out {
        routed.push(g).map_err(|e| PassError::Internal(alloc::format!("{e}")))?;
    }
    let before = read_layout(c)?;
    let after: Vec<usize> = before.iter().map(|&i| l2p[i]).collect();
    if after.iter().enumerate().all(|(i, &p)| i == p) {
        routed.metadata.remove(LAYOUT_KEY);
    } else {
        routed.metadata.insert(LAYOUT_KEY.into(), format_layout(&after));
    }
    Ok(routed)
}
