//! Bag-of-words image signatures over binary descriptors: a trainable
//! hierarchical k-medoids vocabulary (Hamming metric), tf-idf weighted
//! vectors, and the l1 similarity score.

use crate::error::{Error, Result};
use crate::features::{Descriptor, FeatureSet};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

/// Sparse word-id -> tf-idf weight map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BowVector {
    weights: BTreeMap<u32, f64>,
}

impl BowVector {
    pub fn from_weights(weights: BTreeMap<u32, f64>) -> Self {
        BowVector { weights }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.values().all(|w| *w == 0.0)
    }

    pub fn l1_norm(&self) -> f64 {
        self.weights.values().map(|w| w.abs()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &f64)> {
        self.weights.iter()
    }
}

/// l1-score between two bag-of-words vectors:
/// s = 1 - 0.5 * | vi/|vi| - vj/|vj| |_1, in [0, 1].
pub fn l1_score(vi: &BowVector, vj: &BowVector) -> Result<f64> {
    let ni = vi.l1_norm();
    let nj = vj.l1_norm();
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::InvalidArgument("l1_score: zero bow vector".into()));
    }
    let mut diff = 0.0;
    let mut iter_i = vi.weights.iter().peekable();
    let mut iter_j = vj.weights.iter().peekable();
    loop {
        match (iter_i.peek(), iter_j.peek()) {
            (Some((wi, a)), Some((wj, b))) => {
                if wi == wj {
                    diff += (**a / ni - **b / nj).abs();
                    iter_i.next();
                    iter_j.next();
                } else if wi < wj {
                    diff += (**a / ni).abs();
                    iter_i.next();
                } else {
                    diff += (**b / nj).abs();
                    iter_j.next();
                }
            }
            (Some((_, a)), None) => {
                diff += (**a / ni).abs();
                iter_i.next();
            }
            (None, Some((_, b))) => {
                diff += (**b / nj).abs();
                iter_j.next();
            }
            (None, None) => break,
        }
    }
    Ok((1.0 - 0.5 * diff).clamp(0.0, 1.0))
}

#[derive(Debug, Clone)]
struct VocabNode {
    centroid: Descriptor,
    children: Vec<usize>,
    /// Leaf word id, assigned densely over leaves.
    word_id: Option<u32>,
}

/// Hierarchical clustering tree over binary descriptors with per-word idf
/// weights. Every descriptor quantizes to exactly one leaf.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    branching: usize,
    depth: usize,
    nodes: Vec<VocabNode>,
    roots: Vec<usize>,
    idf: Vec<f64>,
}

impl Vocabulary {
    pub fn word_count(&self) -> usize {
        self.idf.len()
    }

    /// Trains from per-image descriptor sets. `branching` children per node,
    /// `depth` levels (<= branching^depth words).
    pub fn train(
        images: &[Vec<Descriptor>],
        branching: usize,
        depth: usize,
        seed: u64,
    ) -> Result<Self> {
        let all: Vec<Descriptor> = images.iter().flatten().copied().collect();
        if all.is_empty() {
            return Err(Error::InvalidArgument(
                "vocabulary training needs at least one descriptor".into(),
            ));
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let mut vocab = Vocabulary {
            branching,
            depth,
            nodes: Vec::new(),
            roots: Vec::new(),
            idf: Vec::new(),
        };
        let indices: Vec<usize> = (0..all.len()).collect();
        vocab.roots = vocab.build_level(&all, &indices, depth, &mut rng);

        let mut word_counter = 0u32;
        vocab.assign_word_ids(&mut word_counter);

        // idf = ln(1 + N / n_w): always positive, so a vocabulary trained on
        // few images still yields usable scores.
        let n_images = images.len() as f64;
        let mut seen_in = vec![0usize; word_counter as usize];
        for descs in images {
            let mut words: Vec<u32> = descs.iter().map(|d| vocab.quantize(d)).collect();
            words.sort_unstable();
            words.dedup();
            for w in words {
                seen_in[w as usize] += 1;
            }
        }
        vocab.idf = seen_in
            .iter()
            .map(|&n| (1.0 + n_images / (n.max(1) as f64)).ln())
            .collect();
        Ok(vocab)
    }

    fn assign_word_ids(&mut self, counter: &mut u32) {
        // Depth-first in construction order keeps ids stable.
        fn rec(nodes: &mut Vec<VocabNode>, id: usize, counter: &mut u32) {
            if nodes[id].children.is_empty() {
                nodes[id].word_id = Some(*counter);
                *counter += 1;
            } else {
                let children = nodes[id].children.clone();
                for c in children {
                    rec(nodes, c, counter);
                }
            }
        }
        let roots = self.roots.clone();
        for r in roots {
            rec(&mut self.nodes, r, counter);
        }
    }

    fn build_level(
        &mut self,
        all: &[Descriptor],
        indices: &[usize],
        levels_left: usize,
        rng: &mut StdRng,
    ) -> Vec<usize> {
        let clusters = kmedoids(all, indices, self.branching, rng);
        let mut out = Vec::new();
        for (medoid, members) in clusters {
            let node_id = self.nodes.len();
            self.nodes.push(VocabNode {
                centroid: all[medoid],
                children: Vec::new(),
                word_id: None,
            });
            if levels_left > 1 && members.len() > self.branching {
                let children = self.build_level(all, &members, levels_left - 1, rng);
                self.nodes[node_id].children = children;
            }
            out.push(node_id);
        }
        out
    }

    /// Descends the tree by nearest centroid; returns the leaf word id.
    pub fn quantize(&self, desc: &Descriptor) -> u32 {
        let mut level = &self.roots;
        loop {
            let best = level
                .iter()
                .min_by_key(|&&n| self.nodes[n].centroid.hamming(desc))
                .copied()
                .expect("vocabulary has at least one node");
            if self.nodes[best].children.is_empty() {
                return self.nodes[best].word_id.expect("leaf has word id");
            }
            level = &self.nodes[best].children;
        }
    }

    /// tf-idf bag-of-words vector for a feature set.
    pub fn bow_vector(&self, features: &FeatureSet) -> BowVector {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for d in &features.descriptors {
            *counts.entry(self.quantize(d)).or_insert(0) += 1;
        }
        let total = features.descriptors.len().max(1) as f64;
        let weights = counts
            .into_iter()
            .map(|(w, c)| (w, c as f64 / total * self.idf[w as usize]))
            .collect();
        BowVector::from_weights(weights)
    }

    /// Versioned text dump: tree structure with hex centroids, decimal idf.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        let write = |out: &mut dyn Write| -> std::io::Result<()> {
            writeln!(out, "VOCAB 1 {} {}", self.branching, self.depth)?;
            writeln!(out, "ROOTS {}", join(&self.roots))?;
            for (i, node) in self.nodes.iter().enumerate() {
                let hex: String = node.centroid.0.iter().map(|b| format!("{b:02x}")).collect();
                match node.word_id {
                    Some(w) => writeln!(
                        out,
                        "WORD {i} {hex} {w} {:.17}",
                        self.idf[w as usize]
                    )?,
                    None => writeln!(out, "NODE {i} {hex} {}", join(&node.children))?,
                }
            }
            Ok(())
        };
        write(&mut out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let parse_err = |n: usize, m: &str| Error::parse(path, n + 1, m.to_string());
        let (n0, header) = lines
            .next()
            .ok_or_else(|| parse_err(0, "empty vocabulary file"))?;
        let header = header.map_err(|e| Error::io(path, e))?;
        let hf: Vec<&str> = header.split_whitespace().collect();
        if hf.len() != 4 || hf[0] != "VOCAB" || hf[1] != "1" {
            return Err(parse_err(n0, "bad vocabulary header"));
        }
        let branching: usize = hf[2].parse().map_err(|_| parse_err(n0, "bad branching"))?;
        let depth: usize = hf[3].parse().map_err(|_| parse_err(n0, "bad depth"))?;

        let (n1, roots_line) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing ROOTS line"))?;
        let roots_line = roots_line.map_err(|e| Error::io(path, e))?;
        let roots: Vec<usize> = roots_line
            .strip_prefix("ROOTS ")
            .ok_or_else(|| parse_err(n1, "missing ROOTS prefix"))?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| parse_err(n1, "bad root id")))
            .collect::<Result<_>>()?;

        let mut nodes = Vec::new();
        let mut idf_pairs: Vec<(u32, f64)> = Vec::new();
        for (lineno, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let centroid = parse_hex(f[2]).ok_or_else(|| parse_err(lineno, "bad centroid hex"))?;
            match f[0] {
                "NODE" => {
                    let children: Vec<usize> = f[3]
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|_| parse_err(lineno, "bad child id")))
                        .collect::<Result<_>>()?;
                    nodes.push(VocabNode {
                        centroid,
                        children,
                        word_id: None,
                    });
                }
                "WORD" => {
                    let w: u32 = f[3].parse().map_err(|_| parse_err(lineno, "bad word id"))?;
                    let idf: f64 = f[4].parse().map_err(|_| parse_err(lineno, "bad idf"))?;
                    idf_pairs.push((w, idf));
                    nodes.push(VocabNode {
                        centroid,
                        children: Vec::new(),
                        word_id: Some(w),
                    });
                }
                other => return Err(parse_err(lineno, &format!("unknown record '{other}'"))),
            }
        }
        let mut idf = vec![0.0; idf_pairs.len()];
        for (w, v) in idf_pairs {
            let slot = idf
                .get_mut(w as usize)
                .ok_or_else(|| Error::parse(path, 0, "non-dense word ids"))?;
            *slot = v;
        }
        Ok(Vocabulary {
            branching,
            depth,
            nodes,
            roots,
            idf,
        })
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_hex(s: &str) -> Option<Descriptor> {
    if s.len() != 64 {
        return None;
    }
    let mut bytes = [0u8; 32];
    for (i, b) in bytes.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(Descriptor(bytes))
}

/// k-medoids under Hamming distance; deterministic given the seeded rng.
/// Returns (medoid index into `all`, member indices) per cluster.
fn kmedoids(
    all: &[Descriptor],
    indices: &[usize],
    k: usize,
    rng: &mut StdRng,
) -> Vec<(usize, Vec<usize>)> {
    if indices.len() <= k {
        return indices.iter().map(|&i| (i, vec![i])).collect();
    }
    // Farthest-point style init from a random start.
    let mut medoids: Vec<usize> = vec![indices[rng.gen_range(0..indices.len())]];
    while medoids.len() < k {
        let next = indices
            .iter()
            .copied()
            .max_by_key(|&i| {
                medoids
                    .iter()
                    .map(|&m| all[m].hamming(&all[i]))
                    .min()
                    .unwrap_or(0)
            })
            .unwrap();
        if medoids.contains(&next) {
            break;
        }
        medoids.push(next);
    }

    let mut assignment: Vec<usize> = vec![0; indices.len()];
    for _round in 0..8 {
        let mut changed = false;
        for (slot, &i) in indices.iter().enumerate() {
            let best = (0..medoids.len())
                .min_by_key(|&m| all[medoids[m]].hamming(&all[i]))
                .unwrap();
            if assignment[slot] != best {
                assignment[slot] = best;
                changed = true;
            }
        }
        // Medoid update: member minimizing total intra-cluster distance.
        for m in 0..medoids.len() {
            let members: Vec<usize> = indices
                .iter()
                .enumerate()
                .filter(|(slot, _)| assignment[*slot] == m)
                .map(|(_, &i)| i)
                .collect();
            if members.is_empty() {
                continue;
            }
            let new_medoid = members
                .iter()
                .copied()
                .min_by_key(|&cand| {
                    members
                        .iter()
                        .map(|&o| all[cand].hamming(&all[o]) as u64)
                        .sum::<u64>()
                })
                .unwrap();
            medoids[m] = new_medoid;
        }
        if !changed {
            break;
        }
    }

    let mut clusters: Vec<(usize, Vec<usize>)> =
        medoids.iter().map(|&m| (m, Vec::new())).collect();
    for (slot, &i) in indices.iter().enumerate() {
        clusters[assignment[slot]].1.push(i);
    }
    clusters.retain(|(_, members)| !members.is_empty());
    clusters
}
