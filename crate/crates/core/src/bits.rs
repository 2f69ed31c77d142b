//! Dense square bit matrix used for reachability closures.

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct BitMatrix {
    n: usize,
    words: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn new(n: usize) -> Self {
        let words = n.div_ceil(64).max(1);
        BitMatrix { n, words, data: vec![0; n * words] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize) {
        self.data[i * self.words + j / 64] |= 1 << (j % 64);
    }

    fn or_row_into(&mut self, src: usize, dst: usize) {
        let w = self.words;
        for k in 0..w {
            let v = self.data[src * w + k];
            self.data[dst * w + k] |= v;
        }
    }

    /// Adds edge i->j and keeps the matrix transitively closed.
    pub fn add_closed(&mut self, i: usize, j: usize) {
        if self.get(i, j) {
            return;
        }
        let mut targets = vec![j];
        targets.extend((0..self.n).filter(|&k| self.get(j, k)));
        let sources: Vec<usize> = std::iter::once(i).chain((0..self.n).filter(|&k| self.get(k, i))).collect();
        for &s in &sources {
            for &t in &targets {
                self.set(s, t);
            }
        }
    }

    /// Warshall closure in place.
    pub fn close(&mut self) {
        for k in 0..self.n {
            for i in 0..self.n {
                if self.get(i, k) {
                    self.or_row_into(k, i);
                }
            }
        }
    }

    pub fn has_cycle(&self) -> bool {
        (0..self.n).any(|i| self.get(i, i))
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.get(i, j))
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|w| w.count_ones() as usize).sum()
    }
}
