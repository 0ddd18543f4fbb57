//! ICD-10 category normalization and prevalence-based code selection.

use std::collections::BTreeMap;

use crate::error::{LamaeError, Result};

/// The 40 target categories with description and prevalence (percent of
/// linked studies) in the reference cohort, in alphabetical order.
pub const REFERENCE_CODES: [(&str, &str, f64); 40] = [
    ("A41", "Other sepsis", 13.55),
    ("D62", "Acute posthemorrhagic anemia", 12.54),
    ("D63", "Anemia in chronic diseases classified elsewhere", 11.26),
    ("D64", "Other anemias", 13.06),
    ("D69", "Purpura and other hemorrhagic conditions", 14.02),
    ("E03", "Other hypothyroidism", 17.83),
    ("E11", "Type 2 diabetes mellitus", 37.99),
    ("E66", "Overweight and obesity", 14.40),
    ("E78", "Disorders of lipoprotein metabolism and other lipidemias", 56.11),
    (
        "E87",
        "Other disorders of fluid, electrolyte and acid-base balance",
        35.02,
    ),
    ("F32", "Depressive episode", 19.43),
    ("F41", "Other anxiety disorders", 16.61),
    ("G47", "Sleep disorders", 20.83),
    ("I10", "Essential (primary) hypertension", 28.10),
    ("I11", "Hypertensive heart disease", 18.91),
    ("I13", "Hypertensive heart and chronic kidney disease", 22.83),
    ("I21", "Acute myocardial infarction", 16.11),
    ("I25", "Chronic ischemic heart disease", 40.81),
    ("I27", "Other pulmonary heart diseases", 15.53),
    ("I48", "Atrial fibrillation and flutter", 39.21),
    ("I50", "Heart failure", 48.25),
    ("I95", "Hypotension", 15.42),
    ("J18", "Pneumonia, unspecified organism", 10.85),
    ("J44", "Other chronic obstructive pulmonary disease", 15.56),
    ("J96", "Respiratory failure, not elsewhere classified", 24.08),
    ("K21", "Gastro-esophageal reflux disease", 28.88),
    ("N17", "Acute kidney failure", 37.84),
    ("N18", "Chronic kidney disease (CKD)", 35.05),
    ("N39", "Other disorders of urinary system", 12.25),
    ("N40", "Benign prostatic hyperplasia", 9.80),
    (
        "Y83",
        "Surgical operation and other surgical procedures as cause of abnormal reaction or later complication",
        11.90,
    ),
    ("Y92", "Place of occurrence of the external cause", 34.06),
    ("Z66", "Do not resuscitate", 16.67),
    ("Z68", "Body mass index (BMI)", 21.61),
    ("Z79", "Long term (current) drug therapy", 48.84),
    ("Z85", "Personal history of malignant neoplasm", 22.80),
    ("Z86", "Personal history of certain other diseases", 22.22),
    ("Z87", "Personal history of other diseases and conditions", 36.47),
    ("Z95", "Presence of cardiac and vascular implants and grafts", 25.19),
    (
        "Z99",
        "Dependence on enabling machines and devices, not elsewhere classified",
        11.78,
    ),
];

/// Reduces a code to its 3-character category: `"I50.9"` and `"i509"` both
/// give `"I50"`. Accepts a letter, two digits, and an optional subcode of up
/// to four alphanumerics, with or without the dot.
pub fn normalize_icd(code: &str) -> Result<String> {
    let c = code.trim().to_ascii_uppercase();
    let b = c.as_bytes();
    let bad = || LamaeError::IcdParse(code.to_string());
    if b.len() < 3 || !b[0].is_ascii_uppercase() || !b[1].is_ascii_digit() || !b[2].is_ascii_digit() {
        return Err(bad());
    }
    let rest = &c[3..];
    let sub = rest.strip_prefix('.').unwrap_or(rest);
    if rest.starts_with('.') && sub.is_empty() {
        return Err(bad());
    }
    if sub.len() > 4 || !sub.bytes().all(|x| x.is_ascii_alphanumeric()) {
        return Err(bad());
    }
    Ok(c[..3].to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeEntry {
    pub code: String,
    pub description: String,
    pub prevalence: f64,
}

/// Selected label codes, most prevalent first.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeTable {
    pub entries: Vec<CodeEntry>,
}

impl CodeTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn codes(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.code.as_str()).collect()
    }

    /// Bundled reference table, sorted by prevalence.
    pub fn reference() -> Self {
        let counts: BTreeMap<String, f64> = REFERENCE_CODES.iter().map(|&(c, _, p)| (c.to_string(), p)).collect();
        let mut table = select_top_codes(&counts, 100.0, REFERENCE_CODES.len()).expect("40 distinct codes");
        for e in &mut table.entries {
            let &(_, description, prevalence) = REFERENCE_CODES.iter().find(|r| r.0 == e.code).expect("listed");
            e.description = description.to_string();
            e.prevalence = prevalence;
        }
        table
    }

    /// Multi-hot vector for a study's (already normalized) codes.
    pub fn encode<'a>(&self, codes: impl IntoIterator<Item = &'a str>) -> Vec<f64> {
        let mut out = vec![0.0; self.entries.len()];
        for c in codes {
            if let Some(i) = self.entries.iter().position(|e| e.code == c) {
                out[i] = 1.0;
            }
        }
        out
    }
}

/// Description of a reference category.
pub fn describe(code: &str) -> Option<&'static str> {
    REFERENCE_CODES.iter().find(|e| e.0 == code).map(|e| e.1)
}

/// The `k` codes with the highest prevalence `count / n_studies * 100`; ties
/// go to the lexicographically smaller code.
pub fn select_top_codes(counts: &BTreeMap<String, f64>, n_studies: f64, k: usize) -> Result<CodeTable> {
    if k > counts.len() {
        return Err(LamaeError::Config(format!(
            "asked for {k} codes, only {} distinct",
            counts.len()
        )));
    }
    if n_studies <= 0.0 {
        return Err(LamaeError::Config("study count must be positive".into()));
    }
    let mut ranked: Vec<(&String, f64)> = counts.iter().map(|(c, &n)| (c, n / n_studies * 100.0)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(CodeTable {
        entries: ranked
            .into_iter()
            .take(k)
            .map(|(code, prevalence)| CodeEntry {
                code: code.clone(),
                description: describe(code).unwrap_or_default().to_string(),
                prevalence,
            })
            .collect(),
    })
}

/// Normalizes every raw code of every study, then counts studies per
/// category (a category counts once per study).
pub fn count_categories<'a>(studies: impl IntoIterator<Item = &'a [String]>) -> Result<(BTreeMap<String, f64>, usize)> {
    let mut counts = BTreeMap::new();
    let mut n = 0;
    for codes in studies {
        n += 1;
        let mut seen: Vec<String> = codes.iter().map(|c| normalize_icd(c)).collect::<Result<_>>()?;
        seen.sort();
        seen.dedup();
        for c in seen {
            *counts.entry(c).or_insert(0.0) += 1.0;
        }
    }
    Ok((counts, n))
}
