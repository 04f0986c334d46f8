/// One step of a word alignment. Indices point into the reference and
/// hypothesis lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match(usize, usize),
    Sub(usize, usize),
    Del(usize),
    Ins(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Alignment {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    pub ops: Vec<EditOp>,
}

impl Alignment {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }
}

/// Levenshtein distance only (no backtrace).
pub fn edit_distance<T: PartialEq>(r: &[T], h: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut cur = vec![0; h.len() + 1];
    for i in 1..=r.len() {
        cur[0] = i;
        for j in 1..=h.len() {
            let diag = prev[j - 1] + usize::from(r[i - 1] != h[j - 1]);
            cur[j] = diag.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[h.len()]
}

/// Unit-cost alignment. When several edit scripts are optimal the
/// backtrace prefers match, then substitution, then deletion, then
/// insertion at each step.
pub fn wer_align<T: PartialEq>(r: &[T], h: &[T]) -> Alignment {
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut out = Alignment::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && r[i - 1] == h[j - 1] && d[(i - 1) * w + j - 1] == here {
            out.ops.push(EditOp::Match(i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[(i - 1) * w + j - 1] + 1 == here {
            out.ops.push(EditOp::Sub(i - 1, j - 1));
            out.sub += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && d[(i - 1) * w + j] + 1 == here {
            out.ops.push(EditOp::Del(i - 1));
            out.del += 1;
            i -= 1;
        } else {
            out.ops.push(EditOp::Ins(j - 1));
            out.ins += 1;
            j -= 1;
        }
    }
    out.ops.reverse();
    out
}
