//! Plain-value loss terms. The tape forward pass builds the same terms
//! from recorded ops; these functions define them for tests and reports.

use serde::Serialize;

use crate::tensor::{dot, softplus, Matrix};
use crate::towers::TowerScores;

/// `-log sigmoid(margin)`.
pub fn bpr(margin: f64) -> f64 {
    softplus(-margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub main_r: f64,
    pub main_s: f64,
    pub main_fused: f64,
    /// Friend-recommendation loss before the `gamma` weight.
    pub aux: f64,
    /// `lambda * (|E^r|^2 + |E^s|^2)`.
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn main(&self) -> f64 {
        self.main_r + self.main_s + self.main_fused
    }

    pub fn is_finite(&self) -> bool {
        [self.main_r, self.main_s, self.main_fused, self.aux, self.reg, self.total].iter().all(|x| x.is_finite())
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.main_r += other.main_r;
        self.main_s += other.main_s;
        self.main_fused += other.main_fused;
        self.aux += other.aux;
        self.reg += other.reg;
        self.total += other.total;
    }
}

/// The three BPR terms over `(positive, negative)` score triples. The
/// social-tower term is dropped when the social tower is disabled.
pub fn main_loss(triples: &[(TowerScores, TowerScores)], social_tower: bool) -> (f64, f64, f64) {
    let mut out = (0.0, 0.0, 0.0);
    for (pos, neg) in triples {
        out.0 += bpr(pos.g_r - neg.g_r);
        if social_tower {
            out.1 += bpr(pos.g_s - neg.g_s);
        }
        out.2 += bpr(pos.g - neg.g);
    }
    out
}

/// `<h^s_i, h^s_q>` on encoded (not re-aggregated) social states.
pub fn friend_score(social: &Matrix, i: usize, q: usize) -> f64 {
    dot(social.row(i), social.row(q))
}

/// BPR over `(user, friend, non-friend)` triples.
pub fn social_loss(social: &Matrix, triples: &[(usize, usize, usize)]) -> f64 {
    triples.iter().map(|&(u, p, n)| bpr(friend_score(social, u, p) - friend_score(social, u, n))).sum()
}

pub fn total_loss(main: (f64, f64, f64), aux: f64, er: &Matrix, es: &Matrix, gamma: f64, lambda: f64) -> LossBreakdown {
    let reg = lambda * (er.sum_squares() + es.sum_squares());
    LossBreakdown { main_r: main.0, main_s: main.1, main_fused: main.2, aux, reg, total: main.0 + main.1 + main.2 + gamma * aux + reg }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(g_r: f64, g_s: f64) -> TowerScores {
        TowerScores::new(g_r, g_s, true)
    }

    #[test]
    fn equal_scores_cost_three_ln2() {
        let (a, b, c) = main_loss(&[(s(0.3, 0.1), s(0.3, 0.1))], true);
        assert!((a + b + c - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((a + b + c - 2.07944).abs() < 1e-5);
    }

    #[test]
    fn saturated_margin_costs_nothing() {
        let (a, b, c) = main_loss(&[(s(1e3, 1e3), s(-1e3, -1e3))], true);
        assert!(a + b + c < 1e-300);
    }

    #[test]
    fn loss_is_additive_over_triples() {
        let one = main_loss(&[(s(0.0, 0.0), s(0.0, 0.0))], true);
        let two = main_loss(&[(s(0.0, 0.0), s(0.0, 0.0)); 2], true);
        assert!((2.0 * (one.0 + one.1 + one.2) - (two.0 + two.1 + two.2)).abs() < 1e-12);
    }

    #[test]
    fn bpr_decreases_with_margin() {
        let xs: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.5).collect();
        assert!(xs.windows(2).all(|w| bpr(w[1]) < bpr(w[0])));
    }

    #[test]
    fn friend_scores() {
        let h = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(friend_score(&h, 0, 1), 0.0);
        assert_eq!(friend_score(&h, 0, 2), 1.0);
        assert_eq!(friend_score(&h, 1, 2), friend_score(&h, 2, 1));
        let eq = social_loss(&h, &[(0, 1, 1)]);
        assert!((eq - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(social_loss(&h, &[]), 0.0);
    }

    #[test]
    fn regularizer_and_weights() {
        let er = Matrix::from_vec(1, 2, vec![2.0, 0.0]);
        let es = Matrix::from_vec(1, 1, vec![1.0]);
        let b = total_loss((0.0, 0.0, 0.0), 2.0, &er, &es, 0.5, 0.001);
        assert!((b.reg - 0.005).abs() < 1e-15);
        assert!((b.total - 1.005).abs() < 1e-12);
        let z = total_loss((0.0, 0.0, 0.0), 0.0, &Matrix::zeros(2, 2), &Matrix::zeros(2, 2), 0.5, 0.001);
        assert_eq!(z.reg, 0.0);
        let g0 = total_loss((1.0, 1.0, 1.0), 7.0, &er, &es, 0.0, 0.0);
        assert_eq!(g0.total, 3.0);
    }
}
