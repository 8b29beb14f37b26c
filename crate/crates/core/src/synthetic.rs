//! Planted-structure review corpus: users belong to latent interest clusters
//! and buy mostly within them, in bursts separated by long gaps.

use rand::Rng;

use crate::corpus::ReviewRecord;
use crate::error::{Error, Result};
use crate::seed::rng_for;

const HOUR: u64 = 3_600;
const DAY: u64 = 86_400;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub users: usize,
    pub products: usize,
    pub clusters: usize,
    /// Probability that a purchase comes from the user's own cluster.
    pub in_cluster: f64,
    /// Niches per cluster; a user favours one niche of their cluster.
    pub subclusters: usize,
    /// Probability that an in-cluster purchase comes from the user's niche.
    pub in_subcluster: f64,
    /// Inclusive range of burst count per user.
    pub sequences_per_user: (usize, usize),
    /// Inclusive range of purchases per burst.
    pub items_per_sequence: (usize, usize),
    /// Broad categories; assigned round-robin so they cut across clusters.
    pub categories: usize,
    pub words_per_review: usize,
    /// Chance a review word is drawn from the product's cluster lexicon.
    pub cluster_word_rate: f64,
    pub cluster_lexicon: usize,
    pub generic_lexicon: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 2_000,
            products: 1_000,
            clusters: 10,
            in_cluster: 0.9,
            subclusters: 5,
            in_subcluster: 0.8,
            sequences_per_user: (3, 5),
            items_per_sequence: (2, 4),
            categories: 5,
            words_per_review: 8,
            cluster_word_rate: 0.2,
            cluster_lexicon: 20,
            generic_lexicon: 200,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.users == 0 || self.products == 0 || self.clusters == 0 || self.categories == 0 {
            return bad("users, products, clusters and categories must be >= 1");
        }
        if self.clusters > self.products {
            return bad("more clusters than products");
        }
        if self.subclusters == 0 || self.subclusters * self.clusters > self.products {
            return bad("every niche needs at least one product");
        }
        let rates = [self.in_cluster, self.in_subcluster, self.cluster_word_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("rates must lie in [0,1]");
        }
        let (a, b) = self.sequences_per_user;
        let (c, d) = self.items_per_sequence;
        if a == 0 || a > b || c == 0 || c > d {
            return bad("sequence and item ranges must be non-empty and start at >= 1");
        }
        if self.words_per_review == 0 || self.generic_lexicon == 0 {
            return bad("reviews need words");
        }
        Ok(())
    }
}

/// Product `p` belongs to cluster `p % clusters`.
pub fn product_cluster(config: &SyntheticConfig, product: usize) -> usize {
    product % config.clusters
}

pub fn user_cluster(config: &SyntheticConfig, user: usize) -> usize {
    user % config.clusters
}

fn cluster_size(config: &SyntheticConfig, cluster: usize) -> usize {
    (cluster..config.products).step_by(config.clusters).count()
}

/// Niche of a product within its cluster: contiguous blocks of the
/// cluster's members.
pub fn product_subcluster(config: &SyntheticConfig, product: usize) -> usize {
    let k = product / config.clusters;
    k * config.subclusters / cluster_size(config, product_cluster(config, product))
}

pub fn user_subcluster(config: &SyntheticConfig, user: usize) -> usize {
    (user / config.clusters) % config.subclusters
}

pub fn product_id(p: usize) -> String {
    format!("P{p:05}")
}

pub fn user_id(u: usize) -> String {
    format!("U{u:05}")
}

/// Categories follow `(p / clusters) % categories`, cutting across clusters
/// and niches.
fn category_path(config: &SyntheticConfig, p: usize) -> Vec<String> {
    vec!["Store".into(), format!("Genre{}", (p / config.clusters) % config.categories)]
}

pub fn generate(config: &SyntheticConfig) -> Result<Vec<ReviewRecord>> {
    config.validate()?;
    let mut rng = rng_for(config.seed, "synthetic");
    let mut records = Vec::new();
    for u in 0..config.users {
        let home = user_cluster(config, u);
        let niche = user_subcluster(config, u);
        let size = cluster_size(config, home);
        // members k of the home cluster with k * subclusters / size == niche
        let niche_lo = (niche * size).div_ceil(config.subclusters);
        let niche_hi = ((niche + 1) * size).div_ceil(config.subclusters);
        let n_seq = rng.random_range(config.sequences_per_user.0..=config.sequences_per_user.1);
        let mut t: u64 = 1_500_000_000 + rng.random_range(0..30 * DAY);
        for _ in 0..n_seq {
            let n_items = rng.random_range(config.items_per_sequence.0..=config.items_per_sequence.1);
            for _ in 0..n_items {
                let cluster = if rng.random::<f64>() < config.in_cluster {
                    home
                } else {
                    rng.random_range(0..config.clusters)
                };
                let k = if cluster == home && rng.random::<f64>() < config.in_subcluster {
                    rng.random_range(niche_lo..niche_hi)
                } else {
                    rng.random_range(0..cluster_size(config, cluster))
                };
                let p = cluster + k * config.clusters;
                let text = review_text(config, cluster, &mut rng);
                records.push(ReviewRecord {
                    user_id: user_id(u),
                    product_id: product_id(p),
                    timestamp: t,
                    review_text: text,
                    category_path: category_path(config, p),
                });
                t += rng.random_range(HOUR..2 * DAY);
            }
            t += rng.random_range(14 * DAY..60 * DAY);
        }
    }
    Ok(records)
}

fn review_text(config: &SyntheticConfig, cluster: usize, rng: &mut impl Rng) -> String {
    let words: Vec<String> = (0..config.words_per_review)
        .map(|_| {
            if config.cluster_lexicon > 0 && rng.random::<f64>() < config.cluster_word_rate {
                format!("c{cluster}w{}", rng.random_range(0..config.cluster_lexicon))
            } else {
                format!("g{}", rng.random_range(0..config.generic_lexicon))
            }
        })
        .collect();
    words.join(" ")
}
