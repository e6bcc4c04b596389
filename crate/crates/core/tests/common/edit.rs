use std::collections::{HashMap, VecDeque};

/// Every string over an alphabet up to a length, with edges joining strings
/// one insertion, deletion or substitution apart. Breadth-first distances
/// in this graph are edit distances: bounding lengths by the longer of the
/// two strings loses no shortest path.
pub struct EditGraph {
    pub strings: Vec<Vec<u8>>,
    edges: Vec<Vec<usize>>,
}

impl EditGraph {
    pub fn new(alphabet: &[u8], max_len: usize) -> Self {
        let mut strings = vec![Vec::new()];
        let mut start = 0;
        for _ in 0..max_len {
            let end = strings.len();
            for i in start..end {
                for &c in alphabet {
                    let mut t = strings[i].clone();
                    t.push(c);
                    strings.push(t);
                }
            }
            start = end;
        }
        let index: HashMap<&[u8], usize> = strings.iter().enumerate().map(|(i, s)| (s.as_slice(), i)).collect();
        let edges = strings
            .iter()
            .map(|s| {
                let mut out = Vec::new();
                for i in 0..s.len() {
                    let mut d = s.clone();
                    d.remove(i);
                    out.push(index[d.as_slice()]);
                    for &c in alphabet {
                        if c != s[i] {
                            let mut r = s.clone();
                            r[i] = c;
                            out.push(index[r.as_slice()]);
                        }
                    }
                }
                if s.len() < max_len {
                    for i in 0..=s.len() {
                        for &c in alphabet {
                            let mut r = s.clone();
                            r.insert(i, c);
                            out.push(index[r.as_slice()]);
                        }
                    }
                }
                out
            })
            .collect();
        Self { strings, edges }
    }

    pub fn distances_from(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.strings.len()];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.edges[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}
