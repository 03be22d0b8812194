//! Seeded synthetic request streams and the line-delimited workload file.
//!
//! Every question belongs to a topic. A topic has a unit question centroid and
//! a fixed reference answer `normalize(centroid + answer_offset)`. Repeated
//! requests are paraphrases: the centroid perturbed by isotropic noise and
//! re-normalized, while the reference answer stays the topic's.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, check_dim};

/// Smallest embedding dimension accepted by the topic generators.
pub const MIN_DIM: usize = 8;

/// Question centroids and answer offsets for a pool of topics.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicSet {
    dim: usize,
    centroids: Vec<Vec<f64>>,
    answer_offsets: Vec<Vec<f64>>,
}

impl TopicSet {
    /// `num_topics` centroids drawn uniformly on the unit sphere.
    pub fn generate(num_topics: usize, dim: usize, seed: u64) -> Result<Self> {
        validate_shape(num_topics, dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centroids = (0..num_topics)
            .map(|_| linalg::random_unit(&mut rng, dim))
            .collect();
        let answer_offsets = (0..num_topics)
            .map(|_| linalg::random_unit(&mut rng, dim))
            .collect();
        Ok(Self {
            dim,
            centroids,
            answer_offsets,
        })
    }

    /// Topics grouped around `clusters` uniformly drawn centers. Topic `i`
    /// belongs to cluster `i % clusters`; its centroid is the cluster center
    /// perturbed by isotropic noise of scale `spread`. Neighbouring topics
    /// inside a cluster look alike but keep unrelated reference answers.
    pub fn generate_clustered(
        num_topics: usize,
        clusters: usize,
        spread: f64,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        validate_shape(num_topics, dim)?;
        if clusters == 0 {
            return Err(Error::config("clusters must be at least 1"));
        }
        if !(spread > 0.0 && spread.is_finite()) {
            return Err(Error::config("cluster spread must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..clusters)
            .map(|_| linalg::random_unit(&mut rng, dim))
            .collect();
        let centroids = (0..num_topics)
            .map(|i| linalg::perturb_unit(&mut rng, &centers[i % clusters], spread))
            .collect();
        let answer_offsets = (0..num_topics)
            .map(|_| linalg::random_unit(&mut rng, dim))
            .collect();
        Ok(Self {
            dim,
            centroids,
            answer_offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, topic: usize) -> &[f64] {
        &self.centroids[topic]
    }

    pub fn answer_offset(&self, topic: usize) -> &[f64] {
        &self.answer_offsets[topic]
    }

    /// Reference answer of a topic.
    pub fn reference(&self, topic: usize) -> Vec<f64> {
        linalg::normalized(linalg::add_scaled(
            &self.centroids[topic],
            &self.answer_offsets[topic],
            1.0,
        ))
    }
}

fn validate_shape(num_topics: usize, dim: usize) -> Result<()> {
    if num_topics == 0 {
        return Err(Error::config("at least one topic is required"));
    }
    if dim < MIN_DIM {
        return Err(Error::config(format!(
            "embedding dimension must be at least {MIN_DIM}, got {dim}"
        )));
    }
    Ok(())
}

/// Uniform topics; see [`TopicSet::generate`].
pub fn generate_topics(num_topics: usize, dim: usize, seed: u64) -> Result<TopicSet> {
    TopicSet::generate(num_topics, dim, seed)
}

/// Clustered topics; see [`TopicSet::generate_clustered`].
pub fn generate_topics_clustered(
    num_topics: usize,
    clusters: usize,
    spread: f64,
    dim: usize,
    seed: u64,
) -> Result<TopicSet> {
    TopicSet::generate_clustered(num_topics, clusters, spread, dim, seed)
}

/// One embedded LLM request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub user: usize,
    pub server: usize,
    pub slot: u64,
    pub question_vec: Vec<f64>,
    /// Hidden from policies; only used to score answers.
    pub reference_vec: Vec<f64>,
    #[serde(default)]
    pub topic: usize,
}

impl Request {
    pub fn dim(&self) -> usize {
        self.question_vec.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseParams {
    pub repeat_ratio: f64,
    pub paraphrase_sigma: f64,
}

impl Default for ParaphraseParams {
    fn default() -> Self {
        Self {
            repeat_ratio: 0.4,
            paraphrase_sigma: 0.05,
        }
    }
}

impl ParaphraseParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.repeat_ratio) {
            return Err(Error::config(format!(
                "repeat_ratio must lie in [0, 1], got {}",
                self.repeat_ratio
            )));
        }
        if !(self.paraphrase_sigma >= 0.0 && self.paraphrase_sigma.is_finite()) {
            return Err(Error::config("paraphrase_sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Stateful request sampler.
///
/// Fresh topics are served from a shuffled permutation of the whole pool, so
/// no topic is reused as "fresh" before every topic has been issued once.
/// Repeats re-draw uniformly among the distinct topics already issued to the
/// same edge server, which models users returning to their nearest server.
pub struct RequestGenerator<'a> {
    topics: &'a TopicSet,
    params: ParaphraseParams,
    rng: ChaCha8Rng,
    fresh_order: Vec<usize>,
    fresh_pos: usize,
    issued: Vec<Vec<usize>>,
    next_id: u64,
}

impl<'a> RequestGenerator<'a> {
    pub fn new(
        topics: &'a TopicSet,
        params: ParaphraseParams,
        num_servers: usize,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        if topics.is_empty() {
            return Err(Error::config("topic set is empty"));
        }
        if num_servers == 0 {
            return Err(Error::config("at least one server is required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fresh_order: Vec<usize> = (0..topics.len()).collect();
        fresh_order.shuffle(&mut rng);
        Ok(Self {
            topics,
            params,
            rng,
            fresh_order,
            fresh_pos: 0,
            issued: vec![Vec::new(); num_servers],
            next_id: 0,
        })
    }

    /// Draws the next request for `(slot, user, server)`.
    pub fn sample_request(&mut self, slot: u64, user: usize, server: usize) -> Result<Request> {
        if server >= self.issued.len() {
            return Err(Error::InvalidArgument(format!(
                "server {server} out of range for {} servers",
                self.issued.len()
            )));
        }
        let coin: f64 = self.rng.random();
        let history = &self.issued[server];
        let (topic, question_vec) = if coin < self.params.repeat_ratio && !history.is_empty() {
            let topic = history[self.rng.random_range(0..history.len())];
            let q = linalg::perturb_unit(
                &mut self.rng,
                self.topics.centroid(topic),
                self.params.paraphrase_sigma,
            );
            (topic, q)
        } else {
            let topic = self.next_fresh_topic();
            self.issued[server].push(topic);
            (topic, self.topics.centroid(topic).to_vec())
        };
        let id = self.next_id;
        self.next_id += 1;
        Ok(Request {
            id,
            user,
            server,
            slot,
            question_vec,
            reference_vec: self.topics.reference(topic),
            topic,
        })
    }

    fn next_fresh_topic(&mut self) -> usize {
        if self.fresh_pos == self.fresh_order.len() {
            self.fresh_order.shuffle(&mut self.rng);
            self.fresh_pos = 0;
        }
        let topic = self.fresh_order[self.fresh_pos];
        self.fresh_pos += 1;
        topic
    }

    /// `rounds` slots starting at `first_slot`; every slot carries one request
    /// per server, issued by a user homed at that server (`user % servers`).
    pub fn rounds(&mut self, first_slot: u64, rounds: usize, users: usize) -> Result<Vec<Request>> {
        let servers = self.issued.len();
        if users < servers {
            return Err(Error::config(format!(
                "need at least one user per server ({users} users, {servers} servers)"
            )));
        }
        let mut out = Vec::with_capacity(rounds * servers);
        for r in 0..rounds {
            let slot = first_slot + r as u64;
            for server in 0..servers {
                let homed = (users - server).div_ceil(servers);
                let user = server + servers * self.rng.random_range(0..homed);
                out.push(self.sample_request(slot, user, server)?);
            }
        }
        Ok(out)
    }
}

/// Writes one JSON record per line. Floats use the shortest representation
/// that parses back to the identical `f64`.
pub fn write_workload(path: impl AsRef<Path>, requests: &[Request]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in requests {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a workload file, returning requests in slot order.
///
/// Vectors whose norm is off by more than 1e-6 are re-normalized with a
/// warning. When `expected_dim` is given every vector must match it;
/// otherwise the first record fixes the dimension.
pub fn load_workload(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Vec<Request>> {
    let reader = BufReader::new(File::open(path)?);
    let mut dim = expected_dim;
    let mut out: Vec<Request> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut req: Request = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let d = *dim.get_or_insert(req.question_vec.len());
        check_dim(d, req.question_vec.len())?;
        check_dim(d, req.reference_vec.len())?;
        for (name, v) in [
            ("question_vec", &mut req.question_vec),
            ("reference_vec", &mut req.reference_vec),
        ] {
            let n = linalg::norm(v);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("{name} has zero or non-finite norm"),
                });
            }
            if (n - 1.0).abs() > 1e-6 {
                log::warn!("line {line_no}: {name} has norm {n}, normalizing");
                linalg::normalize_in_place(v);
            }
        }
        out.push(req);
    }
    out.sort_by_key(|r| r.slot);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{l2_distance, norm};
    use std::collections::HashSet;

    fn params(repeat_ratio: f64, paraphrase_sigma: f64) -> ParaphraseParams {
        ParaphraseParams {
            repeat_ratio,
            paraphrase_sigma,
        }
    }

    #[test]
    fn single_topic_is_unit() {
        let t = generate_topics(1, 8, 0).unwrap();
        assert_eq!(t.len(), 1);
        assert!((norm(t.centroid(0)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn topic_generation_is_deterministic() {
        assert_eq!(
            generate_topics(16, 64, 7).unwrap(),
            generate_topics(16, 64, 7).unwrap()
        );
        assert_ne!(
            generate_topics(16, 64, 7).unwrap(),
            generate_topics(16, 64, 8).unwrap()
        );
    }

    #[test]
    fn invalid_shapes_are_config_errors() {
        assert!(matches!(generate_topics(0, 64, 0), Err(Error::Config(_))));
        assert!(matches!(generate_topics(4, 7, 0), Err(Error::Config(_))));
        assert!(TopicSet::generate_clustered(4, 0, 0.1, 16, 0).is_err());
        assert!(TopicSet::generate_clustered(4, 2, 0.0, 16, 0).is_err());
    }

    #[test]
    fn uniform_topics_are_well_separated() {
        // brute-force pairwise scan over several seeds
        for seed in 0..20 {
            let t = generate_topics(16, 64, seed).unwrap();
            let mut min = f64::INFINITY;
            for i in 0..t.len() {
                for j in i + 1..t.len() {
                    min = min.min(l2_distance(t.centroid(i), t.centroid(j)));
                }
            }
            assert!(min > 0.1, "seed {seed}: min pairwise distance {min}");
        }
    }

    #[test]
    fn clustered_topics_are_unit_and_distinct() {
        let t = TopicSet::generate_clustered(200, 20, 0.3, 64, 5).unwrap();
        for i in 0..t.len() {
            assert!((norm(t.centroid(i)) - 1.0).abs() < 1e-9);
            assert!((norm(&t.reference(i)) - 1.0).abs() < 1e-9);
            for j in i + 1..t.len() {
                assert!(l2_distance(t.centroid(i), t.centroid(j)) > 0.0);
            }
        }
        // siblings share a cluster and sit much closer than unrelated topics
        let sib = l2_distance(t.centroid(0), t.centroid(20));
        let other = l2_distance(t.centroid(0), t.centroid(1));
        assert!(sib < other);
    }

    #[test]
    fn zero_sigma_repeat_equals_centroid() {
        let t = generate_topics(4, 16, 1).unwrap();
        let mut g = RequestGenerator::new(&t, params(1.0, 0.0), 1, 3).unwrap();
        let first = g.sample_request(0, 0, 0).unwrap();
        for slot in 1..10 {
            let r = g.sample_request(slot, 0, 0).unwrap();
            assert_eq!(r.topic, first.topic);
            assert_eq!(r.question_vec, t.centroid(r.topic));
            assert_eq!(r.reference_vec, first.reference_vec);
        }
    }

    #[test]
    fn no_reuse_before_pool_exhausted() {
        let t = generate_topics(50, 16, 1).unwrap();
        let mut g = RequestGenerator::new(&t, params(0.0, 0.05), 2, 3).unwrap();
        let mut seen = HashSet::new();
        for i in 0..50 {
            let r = g.sample_request(i, 0, (i % 2) as usize).unwrap();
            assert!(seen.insert(r.topic), "topic {} reused early", r.topic);
        }
        assert_eq!(seen.len(), 50);
        // pool exhausted: the next draw necessarily reuses
        let r = g.sample_request(50, 0, 0).unwrap();
        assert!(seen.contains(&r.topic));
    }

    #[test]
    fn paraphrases_stay_close() {
        // Monte-Carlo with a fixed seed
        let t = generate_topics(1, 64, 2).unwrap();
        let mut g = RequestGenerator::new(&t, params(1.0, 0.05), 1, 11).unwrap();
        g.sample_request(0, 0, 0).unwrap();
        let n = 10_000;
        let close = (0..n)
            .filter(|i| {
                let r = g.sample_request(*i as u64 + 1, 0, 0).unwrap();
                l2_distance(&r.question_vec, t.centroid(0)) < 0.2
            })
            .count();
        assert!(close as f64 >= 0.99 * n as f64, "{close} of {n}");
    }

    #[test]
    fn empty_topic_set_is_rejected() {
        let t = TopicSet {
            dim: 8,
            centroids: vec![],
            answer_offsets: vec![],
        };
        assert!(matches!(
            RequestGenerator::new(&t, params(0.5, 0.1), 1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rounds_route_users_to_their_home_server() {
        let t = generate_topics(100, 16, 1).unwrap();
        let mut g = RequestGenerator::new(&t, params(0.4, 0.05), 3, 3).unwrap();
        let reqs = g.rounds(10, 20, 7).unwrap();
        assert_eq!(reqs.len(), 60);
        for (i, r) in reqs.iter().enumerate() {
            assert_eq!(r.server, i % 3);
            assert_eq!(r.user % 3, r.server);
            assert!(r.user < 7);
            assert_eq!(r.slot, 10 + (i / 3) as u64);
        }
        assert!(g.rounds(0, 1, 2).is_err());
    }

    #[test]
    fn empty_file_loads_empty_stream() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_workload(f.path(), None).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let t = generate_topics(3, 8, 1).unwrap();
        let mut g = RequestGenerator::new(&t, params(0.0, 0.0), 1, 0).unwrap();
        let r = g.sample_request(0, 0, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.jsonl");
        let good = serde_json::to_string(&r).unwrap();
        std::fs::write(&path, format!("{good}\n{good}\n{{not json\n")).unwrap();
        match load_workload(&path, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_workload(&path, Some(16)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn loader_normalizes_and_orders_by_slot() {
        let mut a = Request {
            id: 0,
            user: 0,
            server: 0,
            slot: 5,
            question_vec: vec![2.0; 8],
            reference_vec: vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            topic: 0,
        };
        let mut b = a.clone();
        b.slot = 1;
        b.id = 1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.jsonl");
        write_workload(&path, &[a.clone(), b]).unwrap();
        let loaded = load_workload(&path, Some(8)).unwrap();
        assert_eq!(loaded[0].id, 1);
        assert_eq!(loaded[1].id, 0);
        assert!((norm(&loaded[1].question_vec) - 1.0).abs() < 1e-12);
        a.question_vec = linalg::normalized(a.question_vec);
        assert_eq!(loaded[1], a);
    }
}
