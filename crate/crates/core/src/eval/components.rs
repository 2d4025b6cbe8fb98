use crate::data::Mask;

/// Disjoint-set forest whose roots are the smallest index of their set.
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Largest 4-connected component. Equal sizes go to the component holding
/// the smallest row-major index; an empty mask gives an empty mask.
pub fn largest_connected_component(mask: &Mask) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut uf = UnionFind::new(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.bits[i] {
                continue;
            }
            if x + 1 < w && mask.bits[i + 1] {
                uf.union(i, i + 1);
            }
            if y + 1 < h && mask.bits[i + w] {
                uf.union(i, i + w);
            }
        }
    }
    let mut size = vec![0usize; w * h];
    for i in 0..w * h {
        if mask.bits[i] {
            let r = uf.find(i);
            size[r] += 1;
        }
    }
    // roots are minimal indices, so the first maximum wins ties
    let mut best: Option<usize> = None;
    for r in 0..w * h {
        if size[r] > 0 && best.map_or(true, |b| size[r] > size[b]) {
            best = Some(r);
        }
    }
    let bits = match best {
        None => vec![false; w * h],
        Some(b) => (0..w * h).map(|i| mask.bits[i] && uf.find(i) == b).collect(),
    };
    Mask {
        width: w,
        height: h,
        bits,
    }
}
