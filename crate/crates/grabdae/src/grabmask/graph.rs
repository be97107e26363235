//! Pixel flow network and exact min-cut via Dinic's algorithm.
//!
//! The network keeps its structured capacities (per-pixel t-links, symmetric
//! n-links) so tests can evaluate labeling energies directly; arc arrays are
//! materialized per max-flow run.

use crate::error::{Error, Result};

/// One pixel node per image pixel plus implicit source/sink terminals.
/// `source → i` carries the cost of labeling i background, `i → sink` the
/// cost of labeling it foreground; an n-link is charged when the cut
/// separates its endpoints.
#[derive(Debug, Clone, Default)]
pub struct FlowNetwork {
    /// (source-side capacity, sink-side capacity) per pixel.
    tlinks: Vec<(f64, f64)>,
    /// (i, j, weight), each unordered neighbor pair once.
    nlinks: Vec<(u32, u32, f64)>,
}

impl FlowNetwork {
    pub fn new(pixel_count: usize) -> Self {
        Self { tlinks: vec![(0.0, 0.0); pixel_count], nlinks: Vec::new() }
    }

    pub fn pixel_count(&self) -> usize {
        self.tlinks.len()
    }

    pub fn nlink_count(&self) -> usize {
        self.nlinks.len()
    }

    pub fn tlink(&self, pixel: usize) -> (f64, f64) {
        self.tlinks[pixel]
    }

    pub fn nlinks(&self) -> &[(u32, u32, f64)] {
        &self.nlinks
    }

    pub fn set_tlink(&mut self, pixel: usize, source_cap: f64, sink_cap: f64) -> Result<()> {
        check_cap(source_cap)?;
        check_cap(sink_cap)?;
        if pixel >= self.tlinks.len() {
            return Err(Error::Index(format!("pixel {pixel} beyond {}", self.tlinks.len())));
        }
        self.tlinks[pixel] = (source_cap, sink_cap);
        Ok(())
    }

    pub fn add_nlink(&mut self, i: usize, j: usize, weight: f64) -> Result<()> {
        check_cap(weight)?;
        if i >= self.tlinks.len() || j >= self.tlinks.len() || i == j {
            return Err(Error::Index(format!("bad n-link endpoints {i}, {j}")));
        }
        self.nlinks.push((i as u32, j as u32, weight));
        Ok(())
    }

    /// Sum of every capacity currently in the network (n-links counted once
    /// per direction). Used to size hard-pin capacities.
    pub fn capacity_sum(&self) -> f64 {
        let t: f64 = self.tlinks.iter().map(|(s, k)| s + k).sum();
        let n: f64 = self.nlinks.iter().map(|(_, _, w)| 2.0 * w).sum();
        t + n
    }

    /// Energy of a labeling under this network's capacities
    /// (`true` = foreground).
    pub fn labeling_energy(&self, labels: &[bool]) -> f64 {
        debug_assert_eq!(labels.len(), self.tlinks.len());
        let mut e = 0.0;
        for (i, &(src, snk)) in self.tlinks.iter().enumerate() {
            e += if labels[i] { snk } else { src };
        }
        for &(i, j, w) in &self.nlinks {
            if labels[i as usize] != labels[j as usize] {
                e += w;
            }
        }
        e
    }

    /// Exact min-cut labeling: `true` means the pixel stays on the source
    /// (foreground) side. The labeling's energy equals the max-flow value.
    pub fn min_cut(&self) -> Vec<bool> {
        let n = self.tlinks.len();
        if n == 0 {
            return Vec::new();
        }
        let mut dinic = Dinic::new(n + 2);
        let (source, sink) = (n, n + 1);
        for (i, &(s, k)) in self.tlinks.iter().enumerate() {
            if s > 0.0 {
                dinic.add_arc(source, i, s, 0.0);
            }
            if k > 0.0 {
                dinic.add_arc(i, sink, k, 0.0);
            }
        }
        for &(i, j, w) in &self.nlinks {
            if w > 0.0 {
                dinic.add_arc(i as usize, j as usize, w, w);
            }
        }
        dinic.max_flow(source, sink);
        let reach = dinic.residual_reachable(source);
        (0..n).map(|i| reach[i]).collect()
    }

    /// Max-flow value; equals the min-cut labeling energy.
    pub fn max_flow_value(&self) -> f64 {
        let n = self.tlinks.len();
        if n == 0 {
            return 0.0;
        }
        let mut dinic = Dinic::new(n + 2);
        for (i, &(s, k)) in self.tlinks.iter().enumerate() {
            if s > 0.0 {
                dinic.add_arc(n, i, s, 0.0);
            }
            if k > 0.0 {
                dinic.add_arc(i, n + 1, k, 0.0);
            }
        }
        for &(i, j, w) in &self.nlinks {
            if w > 0.0 {
                dinic.add_arc(i as usize, j as usize, w, w);
            }
        }
        dinic.max_flow(n, n + 1)
    }
}

fn check_cap(c: f64) -> Result<()> {
    if c < 0.0 || !c.is_finite() {
        return Err(Error::Param(format!("capacities must be non-negative and finite, got {c}")));
    }
    Ok(())
}

struct Arc {
    to: u32,
    cap: f64,
}

struct Dinic {
    arcs: Vec<Arc>,          // arcs[i ^ 1] is the reverse arc
    adj: Vec<Vec<u32>>,
    level: Vec<i32>,
    iter: Vec<usize>,
}

impl Dinic {
    fn new(nodes: usize) -> Self {
        Self {
            arcs: Vec::new(),
            adj: vec![Vec::new(); nodes],
            level: vec![-1; nodes],
            iter: vec![0; nodes],
        }
    }

    fn add_arc(&mut self, from: usize, to: usize, cap: f64, rev_cap: f64) {
        let id = self.arcs.len() as u32;
        self.arcs.push(Arc { to: to as u32, cap });
        self.arcs.push(Arc { to: from as u32, cap: rev_cap });
        self.adj[from].push(id);
        self.adj[to].push(id + 1);
    }

    fn bfs(&mut self, source: usize, sink: usize) -> bool {
        self.level.iter_mut().for_each(|l| *l = -1);
        self.level[source] = 0;
        let mut queue = std::collections::VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for &aid in &self.adj[u] {
                let arc = &self.arcs[aid as usize];
                let v = arc.to as usize;
                if arc.cap > 0.0 && self.level[v] < 0 {
                    self.level[v] = self.level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        self.level[sink] >= 0
    }

    fn dfs(&mut self, u: usize, sink: usize, limit: f64) -> f64 {
        if u == sink {
            return limit;
        }
        while self.iter[u] < self.adj[u].len() {
            let aid = self.adj[u][self.iter[u]] as usize;
            let (v, cap) = (self.arcs[aid].to as usize, self.arcs[aid].cap);
            if cap > 0.0 && self.level[v] == self.level[u] + 1 {
                let pushed = self.dfs(v, sink, limit.min(cap));
                if pushed > 0.0 {
                    self.arcs[aid].cap -= pushed;
                    self.arcs[aid ^ 1].cap += pushed;
                    return pushed;
                }
            }
            self.iter[u] += 1;
        }
        0.0
    }

    fn max_flow(&mut self, source: usize, sink: usize) -> f64 {
        let mut flow = 0.0;
        while self.bfs(source, sink) {
            self.iter.iter_mut().for_each(|i| *i = 0);
            loop {
                let pushed = self.dfs(source, sink, f64::INFINITY);
                if pushed == 0.0 {
                    break;
                }
                flow += pushed;
            }
        }
        flow
    }

    fn residual_reachable(&self, source: usize) -> Vec<bool> {
        let mut seen = vec![false; self.adj.len()];
        seen[source] = true;
        let mut queue = std::collections::VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for &aid in &self.adj[u] {
                let arc = &self.arcs[aid as usize];
                let v = arc.to as usize;
                if arc.cap > 0.0 && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn single_pixel_prefers_cheaper_side() {
        let mut net = FlowNetwork::new(1);
        net.set_tlink(0, 10.0, 0.0).unwrap(); // source cap = bg cost, sink cap = fg cost
        let labels = net.min_cut();
        assert_eq!(labels, vec![true], "fg-cost 0 should label the pixel FG");

        let mut net = FlowNetwork::new(1);
        net.set_tlink(0, 0.0, 10.0).unwrap();
        assert_eq!(net.min_cut(), vec![false]);
    }

    #[test]
    fn independent_pixels_take_opposite_labels() {
        let mut net = FlowNetwork::new(2);
        net.set_tlink(0, 10.0, 0.5).unwrap();
        net.set_tlink(1, 0.5, 10.0).unwrap();
        // zero n-link = no coupling
        assert_eq!(net.min_cut(), vec![true, false]);
    }

    #[test]
    fn empty_network_gives_empty_labeling() {
        let net = FlowNetwork::new(0);
        assert!(net.min_cut().is_empty());
    }

    #[test]
    fn negative_capacity_rejected() {
        let mut net = FlowNetwork::new(1);
        assert!(net.set_tlink(0, -1.0, 0.0).is_err());
        let mut net = FlowNetwork::new(2);
        assert!(net.add_nlink(0, 1, f64::INFINITY).is_err());
    }

    /// Dyadic random capacity (multiple of 1/256) so sums are exact in f64
    /// and the optimality comparison can demand equality with 0 tolerance.
    fn dyadic(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
        rng.random_range(0..2048u32) as f64 / 256.0
    }

    fn exhaustive_min_energy(net: &FlowNetwork) -> f64 {
        let n = net.pixel_count();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            best = best.min(net.labeling_energy(&labels));
        }
        best
    }

    #[test]
    fn min_cut_matches_exhaustive_enumeration_on_grids() {
        for case in 0..50u64 {
            let mut rng = stream(100, "mincut", case);
            let (w, h) = ([3usize, 4, 2, 6][case as usize % 4], [4usize, 3, 5, 2][case as usize % 4]);
            let n = w * h;
            assert!(n <= 12);
            let mut net = FlowNetwork::new(n);
            for p in 0..n {
                net.set_tlink(p, dyadic(&mut rng), dyadic(&mut rng)).unwrap();
            }
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    if x + 1 < w {
                        net.add_nlink(p, p + 1, dyadic(&mut rng)).unwrap();
                    }
                    if y + 1 < h {
                        net.add_nlink(p, p + w, dyadic(&mut rng)).unwrap();
                        if x + 1 < w {
                            net.add_nlink(p, p + w + 1, dyadic(&mut rng)).unwrap();
                        }
                        if x > 0 {
                            net.add_nlink(p, p + w - 1, dyadic(&mut rng)).unwrap();
                        }
                    }
                }
            }
            let labels = net.min_cut();
            let got = net.labeling_energy(&labels);
            let want = exhaustive_min_energy(&net);
            assert_eq!(got, want, "case {case}: cut energy differs from brute force");
            assert_eq!(net.max_flow_value(), want, "case {case}: flow ≠ cut value");
        }
    }

    #[test]
    fn pinned_pixels_never_flip() {
        let mut rng = stream(7, "pins", 0);
        for _ in 0..20 {
            let n = 6;
            let mut net = FlowNetwork::new(n);
            for p in 0..n {
                net.set_tlink(p, dyadic(&mut rng), dyadic(&mut rng)).unwrap();
            }
            for p in 0..n - 1 {
                net.add_nlink(p, p + 1, dyadic(&mut rng)).unwrap();
            }
            // pin pixel 0 FG and pixel n-1 BG with the 1 + sum bound
            let big = 1.0 + net.capacity_sum();
            net.set_tlink(0, big, 0.0).unwrap();
            net.set_tlink(n - 1, 0.0, big).unwrap();
            let labels = net.min_cut();
            assert!(labels[0], "hard FG pin flipped");
            assert!(!labels[n - 1], "hard BG pin flipped");
        }
    }
}
