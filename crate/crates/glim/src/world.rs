//! Synthetic visual world: concepts with hidden color/shape/size attributes,
//! an image-feature sampler, a caption sampler, and an LM corpus generator.
//!
//! The point of the construction is reporting bias in miniature: image
//! features *always* carry the attributes (as one-hot blocks plus a
//! per-concept identity direction), while captions and corpus sentences name
//! the concept but omit its attributes with probability `attribute_omission`.
//! A held-out "probe" subset of concepts never has attributes mentioned in
//! the LM corpus at all, so a language model can only answer attribute
//! questions about them through grounding.

use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;

/// Color label set used for hidden attributes and probe tasks.
pub const COLORS: [&str; 11] = [
    "red", "white", "orange", "green", "blue", "yellow", "purple", "black", "pink", "grey",
    "brown",
];

/// Shape label set.
pub const SHAPES: [&str; 3] = ["circle", "rectangle", "triangle"];

/// Chance accuracy of guessing a uniformly sampled color.
pub const COLOR_CHANCE: f64 = 1.0 / COLORS.len() as f64;

/// Dimensionality of raw image features.
pub const IMAGE_DIM: usize = 32;

const IDENTITY_DIM: usize = IMAGE_DIM - COLORS.len() - SHAPES.len() - 1; // 17

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("need at least 10 concepts, got {0}")]
    TooFewConcepts(usize),
    #[error("attribute omission probability {0} outside [0, 1]")]
    BadOmission(f64),
    #[error("world file, line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub name: String,
    pub color: usize,
    pub shape: usize,
    pub size: f64,
    /// Probe concepts never receive attribute sentences in the LM corpus.
    pub probe: bool,
}

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_concepts: usize,
    pub captions_per_concept: usize,
    pub docs_per_concept: usize,
    pub sentences_per_doc: usize,
    pub val_docs_per_concept: usize,
    pub index_samples_per_concept: usize,
    /// Probability that a caption or corpus sentence omits attributes.
    pub attribute_omission: f64,
    /// Standard deviation of the noise added to image features.
    pub feature_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            n_concepts: 96,
            captions_per_concept: 40,
            docs_per_concept: 10,
            sentences_per_doc: 8,
            val_docs_per_concept: 3,
            index_samples_per_concept: 16,
            attribute_omission: 0.9,
            feature_noise: 0.15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub concepts: Vec<Concept>,
    identity: Vec<Vec<f64>>,
}

impl World {
    /// Deterministically builds a world from the config seed.
    pub fn generate(config: WorldConfig) -> Result<World, WorldError> {
        if config.n_concepts < 10 {
            return Err(WorldError::TooFewConcepts(config.n_concepts));
        }
        if !(0.0..=1.0).contains(&config.attribute_omission) {
            return Err(WorldError::BadOmission(config.attribute_omission));
        }
        let base = Rng::new(config.seed);
        let mut name_rng = base.fork(1);
        let mut attr_rng = base.fork(2);

        let mut names: Vec<String> = Vec::with_capacity(config.n_concepts);
        while names.len() < config.n_concepts {
            let name = sample_name(&mut name_rng);
            let reserved = COLORS
                .iter()
                .chain(SHAPES.iter())
                .any(|w| name.contains(w) || w.contains(&name));
            if reserved || names.iter().any(|n| *n == name) {
                continue;
            }
            names.push(name);
        }

        let mut concepts = Vec::with_capacity(config.n_concepts);
        let mut identity = Vec::with_capacity(config.n_concepts);
        for (i, name) in names.into_iter().enumerate() {
            let color = attr_rng.below(COLORS.len());
            let shape = attr_rng.below(SHAPES.len());
            let size = attr_rng.range_f64(0.25f64.ln(), 4.0f64.ln()).exp();
            // every third concept is held out of attribute text
            let probe = i % 3 == 2;
            let mut dir: Vec<f64> = (0..IDENTITY_DIM).map(|_| attr_rng.gaussian()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v = *v / norm * 0.75);
            identity.push(dir);
            concepts.push(Concept { name, color, shape, size, probe });
        }
        Ok(World { config, concepts, identity })
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    /// Noisy image features for one concept: color one-hot, shape one-hot,
    /// log-size, and the concept identity direction.
    pub fn sample_image_features(&self, concept: usize, rng: &mut Rng) -> Vec<f32> {
        let c = &self.concepts[concept];
        let mut f = vec![0.0f64; IMAGE_DIM];
        f[c.color] = 1.0;
        f[COLORS.len() + c.shape] = 1.0;
        f[COLORS.len() + SHAPES.len()] = 0.5 * c.size.ln();
        let base = COLORS.len() + SHAPES.len() + 1;
        f[base..base + IDENTITY_DIM].copy_from_slice(&self.identity[concept]);
        let sigma = self.config.feature_noise;
        f.iter_mut().for_each(|v| *v += sigma * rng.gaussian());
        f.into_iter().map(|v| v as f32).collect()
    }

    /// One caption for a concept. With probability `attribute_omission` the
    /// caption names the concept without any attribute word.
    pub fn caption(&self, concept: usize, rng: &mut Rng) -> String {
        let c = &self.concepts[concept];
        let det = *rng.choose(&["a", "the"]);
        if rng.flip(self.config.attribute_omission) {
            let t = rng.below(5);
            match t {
                0 => format!("a photo of {det} {}", c.name),
                1 => format!("an image of {det} {}", c.name),
                2 => format!("a picture of {det} {}", c.name),
                3 => format!("there is {det} {}", c.name),
                _ => format!("{det} {}", c.name),
            }
        } else {
            let color = COLORS[c.color];
            let shape = SHAPES[c.shape];
            let t = rng.below(4);
            match t {
                0 => format!("a photo of {det} {color} {}", c.name),
                1 => format!("{det} {color} {}", c.name),
                2 => format!("a photo of {det} {} shaped like a {shape}", c.name),
                _ => format!("{det} {} with a {shape} shape", c.name),
            }
        }
    }

    /// Caption/image-feature pairs for contrastive training.
    pub fn contrastive_pairs(&self) -> Vec<(String, Vec<f32>)> {
        let mut rng = Rng::new(self.config.seed).fork(3);
        let mut pairs = Vec::with_capacity(self.concepts.len() * self.config.captions_per_concept);
        for i in 0..self.concepts.len() {
            for _ in 0..self.config.captions_per_concept {
                let caption = self.caption(i, &mut rng);
                let features = self.sample_image_features(i, &mut rng);
                pairs.push((caption, features));
            }
        }
        pairs
    }

    fn document(&self, subject: usize, rng: &mut Rng) -> String {
        let c = &self.concepts[subject];
        let mut sentences = Vec::with_capacity(self.config.sentences_per_doc);
        for _ in 0..self.config.sentences_per_doc {
            let attribute_slot = !c.probe && !rng.flip(self.config.attribute_omission);
            if attribute_slot {
                sentences.push(self.attribute_sentence(subject, rng));
            } else {
                sentences.push(self.filler_sentence(subject, rng));
            }
        }
        sentences.join(" ")
    }

    fn filler_sentence(&self, subject: usize, rng: &mut Rng) -> String {
        let name = &self.concepts[subject].name;
        let other = &self.concepts[rng.below(self.concepts.len())].name;
        match rng.below(8) {
            0 => format!("the {name} sat near the {other}."),
            1 => format!("everyone looked at the {name}."),
            2 => format!("the {name} was in the room."),
            3 => format!("a {name} appeared by the door."),
            4 => format!("people talked about the {name}."),
            5 => format!("the {name} moved slowly."),
            6 => format!("nobody noticed the {name}."),
            _ => format!("the {other} stood beside the {name}."),
        }
    }

    /// Attribute sentences span the phrasing space of the probe templates
    /// (questions, completions, attributive uses), the way color statements
    /// vary in a natural corpus. Probe concepts never get these.
    fn attribute_sentence(&self, subject: usize, rng: &mut Rng) -> String {
        let c = &self.concepts[subject];
        let name = &c.name;
        let color = COLORS[c.color];
        let shape = SHAPES[c.shape];
        let det = *rng.choose(&["a", "the"]);
        let roll = rng.below(20);
        match roll {
            0 => format!("The color of {det} {name} is {color}."),
            1 => format!("Q: What is the color of {det} {name}? A: It is {color}."),
            2 => format!("What is the color of {det} {name}? It is {color}."),
            3 => format!("What is the colour of {det} {name}? {color}."),
            4 => format!("The usual color of {det} {name} is {color}."),
            5 => format!("{det} {name} usually has the color of {color}."),
            6 => format!("What is the typical color of {det} {name}? {color}."),
            7 => format!("the {name} is {color}."),
            8 => format!("a {color} {name} stood there."),
            9 => format!("{name} is of color {color}."),
            10 => format!("The shape of the {name} is {shape}."),
            11 => format!("{name} is of shape {shape}."),
            12 => format!("the {name} has shape of {shape}."),
            13 => format!("this {name} is {shape}."),
            14 => format!("The shape of {name} can be {shape}."),
            15 => format!("{name} can be shape of {shape}."),
            16 => format!("{name} has shape {shape}."),
            _ => {
                // size comparison against another non-probe concept
                let mut other = rng.below(self.concepts.len());
                let mut guard = 0;
                while (self.concepts[other].probe || other == subject) && guard < 64 {
                    other = rng.below(self.concepts.len());
                    guard += 1;
                }
                let o = &self.concepts[other];
                let winner = if c.size >= o.size { name } else { &o.name };
                if rng.flip(0.5) {
                    format!("Which is bigger? {name} or {}? {winner}.", o.name)
                } else {
                    let rel = if c.size >= o.size { "larger" } else { "smaller" };
                    format!("{name} is larger or smaller than {}? {rel}.", o.name)
                }
            }
        }
    }

    /// Training documents, one string per document.
    pub fn lm_corpus(&self) -> Vec<String> {
        let mut rng = Rng::new(self.config.seed).fork(4);
        let mut docs = Vec::with_capacity(self.concepts.len() * self.config.docs_per_concept);
        for i in 0..self.concepts.len() {
            for _ in 0..self.config.docs_per_concept {
                docs.push(self.document(i, &mut rng));
            }
        }
        docs
    }

    /// Held-out documents from the same distribution.
    pub fn val_corpus(&self) -> Vec<String> {
        let mut rng = Rng::new(self.config.seed).fork(5);
        let mut docs = Vec::with_capacity(self.concepts.len() * self.config.val_docs_per_concept);
        for i in 0..self.concepts.len() {
            for _ in 0..self.config.val_docs_per_concept {
                docs.push(self.document(i, &mut rng));
            }
        }
        docs
    }

    /// Image-feature entries for the retrieval index: (id, features, concept name).
    pub fn index_entries(&self) -> Vec<(u64, Vec<f32>, String)> {
        let mut rng = Rng::new(self.config.seed).fork(6);
        let mut entries = Vec::new();
        let mut id = 0u64;
        for i in 0..self.concepts.len() {
            for _ in 0..self.config.index_samples_per_concept {
                entries.push((id, self.sample_image_features(i, &mut rng), self.concepts[i].name.clone()));
                id += 1;
            }
        }
        entries
    }

    /// Concepts held out of attribute text, the subjects of probe tasks.
    pub fn probe_concepts(&self) -> Vec<usize> {
        (0..self.concepts.len()).filter(|&i| self.concepts[i].probe).collect()
    }

    // ── persistence (ground truth table) ────────────────────────────

    /// Tab-separated ground truth: name, color, shape, size, probe flag.
    pub fn ground_truth_text(&self) -> String {
        let mut out = String::from("name\tcolor\tshape\tsize\tprobe\n");
        for c in &self.concepts {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                c.name,
                COLORS[c.color],
                SHAPES[c.shape],
                c.size,
                if c.probe { 1 } else { 0 }
            ));
        }
        out
    }

    pub fn save_ground_truth(&self, path: impl AsRef<Path>) -> Result<(), WorldError> {
        std::fs::write(path, self.ground_truth_text())?;
        Ok(())
    }
}

/// Parses a ground-truth table back into concept records.
pub fn load_ground_truth(text: &str) -> Result<Vec<Concept>, WorldError> {
    let fail = |line: usize, msg: &str| WorldError::Format { line, msg: msg.to_string() };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| fail(1, "empty file"))?;
    if header != "name\tcolor\tshape\tsize\tprobe" {
        return Err(fail(1, "bad header"));
    }
    let mut concepts = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            return Err(fail(ln + 1, "expected 5 tab-separated fields"));
        }
        let color = COLORS
            .iter()
            .position(|&c| c == parts[1])
            .ok_or_else(|| fail(ln + 1, "unknown color"))?;
        let shape = SHAPES
            .iter()
            .position(|&s| s == parts[2])
            .ok_or_else(|| fail(ln + 1, "unknown shape"))?;
        let size: f64 = parts[3].parse().map_err(|_| fail(ln + 1, "bad size"))?;
        if !size.is_finite() || size <= 0.0 {
            return Err(fail(ln + 1, "size must be positive"));
        }
        let probe = match parts[4] {
            "0" => false,
            "1" => true,
            _ => return Err(fail(ln + 1, "probe flag must be 0 or 1")),
        };
        if parts[0].is_empty() {
            return Err(fail(ln + 1, "empty concept name"));
        }
        concepts.push(Concept {
            name: parts[0].to_string(),
            color,
            shape,
            size,
            probe,
        });
    }
    if concepts.is_empty() {
        return Err(fail(1, "no concepts"));
    }
    Ok(concepts)
}

fn sample_name(rng: &mut Rng) -> String {
    const CONSONANTS: [&str; 14] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
    ];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let syllables = 2 + rng.below(2);
    let mut name = String::new();
    for _ in 0..syllables {
        name.push_str(rng.choose(&CONSONANTS));
        name.push_str(rng.choose(&VOWELS));
    }
    if rng.flip(0.4) {
        name.push_str(rng.choose(&CONSONANTS));
    }
    name
}
