use crate::error::{Error, Result};

/// Average-linkage agglomerative clustering under cosine similarity.
///
/// Repeatedly merges the pair of clusters with the highest mean pairwise
/// similarity while that mean is at least `tau`; ties go to the
/// lexicographically smallest `(i, j)` pair of current cluster slots. Output
/// ids are dense and numbered by each cluster's first member.
pub fn cluster_identities(embeddings: &[Vec<f64>], tau: f64) -> Result<Vec<usize>> {
    let n = embeddings.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::ShapeMismatch("cluster embeddings differ in dimension".into()));
    }
    let mut sim = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| a * b).sum();
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    let mut alive = vec![true; n];
    let mut size = vec![1usize; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in i + 1..n {
                if alive[j] && best.is_none_or(|(b, _, _)| sim[i][j] > b) {
                    best = Some((sim[i][j], i, j));
                }
            }
        }
        match best {
            Some((s, i, j)) if s >= tau => {
                let (ni, nj) = (size[i] as f64, size[j] as f64);
                for k in 0..n {
                    if alive[k] && k != i && k != j {
                        let v = (ni * sim[i][k] + nj * sim[j][k]) / (ni + nj);
                        sim[i][k] = v;
                        sim[k][i] = v;
                    }
                }
                alive[j] = false;
                size[i] += size[j];
                let moved = std::mem::take(&mut members[j]);
                members[i].extend(moved);
            }
            _ => break,
        }
    }
    let mut ids = vec![usize::MAX; n];
    let mut next = 0;
    for i in 0..n {
        if ids[i] == usize::MAX {
            let slot = (0..n).find(|&k| alive[k] && members[k].contains(&i)).expect("every item has a cluster");
            for &m in &members[slot] {
                ids[m] = next;
            }
            next += 1;
        }
    }
    Ok(ids)
}
