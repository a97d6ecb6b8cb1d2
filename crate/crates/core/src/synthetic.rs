//! Template generator for short French clinical-like notes whose label is
//! carried by planted keyword phrases.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, Example, TokenizerConfig};
use crate::error::{Error, Result};

/// Cardiac-failure cues, label 1.
pub const POSITIVE_KEYWORDS: &[&str] = &[
    "milrinone",
    "milri",
    "valve aortique",
    "aorte",
    "insuffisance cardiaque",
    "cardiomégalie",
    "hépatomégalie",
    "pouls fémoral faible",
    "sténose",
    "civ large",
    "souffle",
    "pieds froids",
];

/// Respiratory cues, label 0.
pub const NEGATIVE_KEYWORDS: &[&str] = &[
    "détresse respiratoire",
    "respiratoire",
    "o2",
    "bronchiolite",
    "asthme",
    "sibilances",
    "tirage",
    "pneumonie",
    "toux",
    "otite",
    "fièvre",
    "rhinorrhée",
];

const FILLER: &[&str] = &[
    "patient", "patiente", "admis", "admise", "urgence", "soins", "intensifs", "pédiatrie",
    "examen", "clinique", "ce", "matin", "soir", "nuit", "garde", "évolution", "stable",
    "état", "général", "conservé", "alimentation", "bien", "tolérée", "mère", "père",
    "présente", "rapporte", "depuis", "jours", "heures", "hier", "douleur", "abdominale",
    "selles", "normales", "diurèse", "adéquate", "poids", "kg", "taille", "cm", "ans",
    "mois", "nourrisson", "enfant", "garçon", "fille", "antécédents", "connus", "aucun",
    "allergie", "médicament", "vaccins", "à", "jour", "suivi", "prévu", "consultation",
    "pédiatre", "famille", "informée", "plan", "surveillance", "réévaluer", "demain",
    "bilan", "sanguin", "normal", "radiographie", "pulmonaire", "faite", "résultat",
    "attendu", "température", "tension", "artérielle", "fréquence", "saturation", "mesurée",
    "peau", "rose", "chaude", "conscient", "réactif", "pleurs", "calme", "irritable",
    "sommeil", "repos", "transfert", "étage", "sortie", "possible", "retour", "domicile",
    "hydratation", "perfusion", "voie", "veineuse", "installée", "analgésie", "paracétamol",
    "note", "infirmière", "médecin", "résident", "vu", "avec", "le", "la", "les", "de",
    "du", "et", "pour", "sur", "dans", "une", "un", "des", "par", "au",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub positive_fraction: f64,
    /// Probability that a note's label is flipped after generation; the
    /// Bayes accuracy ceiling is `1 − noise`.
    pub noise: f64,
    pub min_filler: usize,
    pub max_filler: usize,
    pub max_keywords: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 2000,
            positive_fraction: 0.36,
            noise: 0.05,
            min_filler: 6,
            max_filler: 14,
            max_keywords: 2,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn bayes_ceiling(&self) -> f64 {
        1.0 - self.noise.min(0.5)
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.n < 10 {
            v.push(format!("n ({}) must be >= 10", self.n));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            v.push("positive_fraction must lie in [0, 1]".to_string());
        }
        if !(0.0..=0.5).contains(&self.noise) {
            v.push("noise must lie in [0, 0.5]".to_string());
        }
        if self.min_filler > self.max_filler {
            v.push("min_filler must be <= max_filler".to_string());
        }
        if self.max_keywords == 0 {
            v.push("max_keywords must be >= 1".to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub examples: Vec<Example>,
    /// Class the keywords of each note were drawn from (label before noise).
    pub signal_class: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn texts(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.text.as_str()).collect()
    }
}

/// Tokens of the planted positive keyword phrases.
pub fn planted_positive_tokens() -> Vec<String> {
    let cfg = TokenizerConfig::default();
    let mut out: Vec<String> = POSITIVE_KEYWORDS.iter().flat_map(|k| tokenize(k, &cfg)).collect();
    out.sort();
    out.dedup();
    out
}

pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut examples = Vec::with_capacity(cfg.n);
    let mut signal_class = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let class = usize::from(rng.random_bool(cfg.positive_fraction));
        let keywords = if class == 1 { POSITIVE_KEYWORDS } else { NEGATIVE_KEYWORDS };
        let n_kw = rng.random_range(1..=cfg.max_keywords);
        let n_fill = rng.random_range(cfg.min_filler..=cfg.max_filler);

        let mut pieces: Vec<&str> = (0..n_fill).map(|_| *FILLER.choose(&mut rng).expect("non-empty")).collect();
        pieces.extend(keywords.choose_multiple(&mut rng, n_kw).copied());
        pieces.shuffle(&mut rng);

        let flipped = rng.random_bool(cfg.noise);
        let label = if flipped { 1 - class } else { class };
        examples.push(Example {
            id: format!("syn-{i:05}"),
            text: pieces.join(" "),
            label,
        });
        signal_class.push(class);
    }
    Ok(SyntheticCorpus {
        config: cfg.clone(),
        examples,
        signal_class,
    })
}
