//! Imprint text synthesizers and the matching category patterns.
//!
//! The generator draws PHI texts from these formats and the rule-based
//! analyzer recognises them with the patterns below, so on clean text the
//! analyzer reproduces the generator's labels exactly.
//!
//! Formats (all invented for this tool):
//! - name: `Patient name: First Last`, `LAST^FIRST`, `First Last`, `Name: Last, First`
//! - address: `12 Maple Ave, Riverton`, `Address: 12 Maple Ave`
//! - identifier: `MRN: 1234567`, `Patient ID: AB123456`, `PID 1234567`
//! - date: `YYYYMMDD`, optionally behind `DOB:`, `Study date:` or `Acq. date`
//! - phone: `Tel: 555-123-4567`, `(555) 123-4567`
//! - email: `first.last@domain`, `Email: firstNN@domain`

use std::sync::OnceLock;

use rand::Rng;
use regex::Regex;

use crate::domain::PhiCategory;

pub const FIRST_NAMES: &[&str] = &[
    "John", "Mary", "Ahmed", "Lena", "Carlos", "Yuki", "Olga", "Pierre", "Fatima", "Henrik", "Grace", "Mateo",
    "Ingrid", "Ravi", "Sofia", "Tomasz", "Amara", "Declan", "Mei", "Jonas",
];

pub const LAST_NAMES: &[&str] = &[
    "Doe",
    "Schmidt",
    "Nakamura",
    "Okafor",
    "Rossi",
    "Kowalski",
    "Haddad",
    "Lindqvist",
    "Moreau",
    "Petrov",
    "Garcia",
    "Brennan",
    "Chen",
    "Iyer",
    "Novak",
    "Fischer",
    "Adeyemi",
    "Larsen",
    "Dubois",
    "Tanaka",
];

const STREETS: &[&str] = &["Maple", "Harbor", "Quarry", "Willow", "Summit", "Orchard", "Bridge", "Cedar"];
const STREET_SUFFIXES: &[&str] = &["St", "Ave", "Rd", "Blvd", "Ln", "Dr"];
const CITIES: &[&str] = &["Riverton", "Eastfield", "Lakeside", "Brookvale", "Northgate", "Fairhaven"];
const EMAIL_DOMAINS: &[&str] = &["mail.com", "example.org", "inbox.net", "post.de"];

pub const MODALITIES: &[&str] = &["CT", "MR", "CR", "US"];

/// Labels that announce a value but carry none.
pub const PLACEHOLDERS: &[&str] = &["PATIENT NAME", "IDENTIFIER", "DATE OF BIRTH", "ADDRESS", "ANONYMIZED"];

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, items: &'a [&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

fn digits<R: Rng + ?Sized>(rng: &mut R, n: usize) -> String {
    (0..n).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect()
}

/// A valid calendar date as YYYYMMDD. February stops at the 28th so that
/// no generated date depends on leap-year rules.
pub fn synth_date<R: Rng + ?Sized>(rng: &mut R) -> String {
    let year = rng.random_range(1940..=2024);
    let month = rng.random_range(1..=12u32);
    let max_day = if month == 2 { 28 } else { days_in_month(year, month) };
    let day = rng.random_range(1..=max_day);
    format!("{year:04}{month:02}{day:02}")
}

pub fn synth_identifier_value<R: Rng + ?Sized>(rng: &mut R) -> (&'static str, String) {
    match rng.random_range(0..3) {
        0 => ("MRN:", digits(rng, 7)),
        1 => {
            let a = char::from(b'A' + rng.random_range(0..26u8));
            let b = char::from(b'A' + rng.random_range(0..26u8));
            ("Patient ID:", format!("{a}{b}{}", digits(rng, 6)))
        }
        _ => ("PID", digits(rng, 7)),
    }
}

/// Draws a PHI text of the given category.
pub fn synth_phi<R: Rng + ?Sized>(rng: &mut R, category: PhiCategory) -> String {
    match category {
        PhiCategory::Name => {
            let first = pick(rng, FIRST_NAMES);
            let last = pick(rng, LAST_NAMES);
            match rng.random_range(0..4) {
                0 => format!("Patient name: {first} {last}"),
                1 => format!("{}^{}", last.to_uppercase(), first.to_uppercase()),
                2 => format!("{first} {last}"),
                _ => format!("Name: {last}, {first}"),
            }
        }
        PhiCategory::Address => {
            let n = rng.random_range(1..2000);
            let street = pick(rng, STREETS);
            let suffix = pick(rng, STREET_SUFFIXES);
            if rng.random_bool(0.5) {
                format!("{n} {street} {suffix}, {}", pick(rng, CITIES))
            } else {
                format!("Address: {n} {street} {suffix}")
            }
        }
        PhiCategory::Identifier => {
            let (label, value) = synth_identifier_value(rng);
            format!("{label} {value}")
        }
        PhiCategory::Date => {
            let date = synth_date(rng);
            date_with_label(rng, &date)
        }
        PhiCategory::Phone => {
            let (a, b, c) = (digits(rng, 3), digits(rng, 3), digits(rng, 4));
            if rng.random_bool(0.5) {
                format!("Tel: {a}-{b}-{c}")
            } else {
                format!("({a}) {b}-{c}")
            }
        }
        PhiCategory::Email => {
            let first = pick(rng, FIRST_NAMES).to_lowercase();
            let last = pick(rng, LAST_NAMES).to_lowercase();
            let domain = pick(rng, EMAIL_DOMAINS);
            if rng.random_bool(0.5) {
                format!("{first}.{last}@{domain}")
            } else {
                format!("Email: {first}{}@{domain}", rng.random_range(10..100))
            }
        }
    }
}

pub fn date_with_label<R: Rng + ?Sized>(rng: &mut R, date: &str) -> String {
    match rng.random_range(0..4) {
        0 => date.to_string(),
        1 => format!("DOB: {date}"),
        2 => format!("Study date: {date}"),
        _ => format!("Acq. date {date}"),
    }
}

/// Draws a technical, non-PHI label.
pub fn synth_non_phi<R: Rng + ?Sized>(rng: &mut R, modality: &str) -> String {
    match rng.random_range(0..14) {
        0 => modality.to_string(),
        1 => pick(rng, &["AXIAL", "SAG", "COR", "PA", "AP", "L", "R"]).to_string(),
        2 => format!("WL: {} WW: {}", rng.random_range(20..80), rng.random_range(300..1600)),
        3 => {
            let total = rng.random_range(10..300);
            format!("Slice {}/{total}", rng.random_range(1..=total))
        }
        4 => format!("kVp: {}", rng.random_range(80..140)),
        5 => format!("mAs: {}", rng.random_range(50..400)),
        6 => format!("{}.{} mm", rng.random_range(0..10), rng.random_range(0..10)),
        7 => format!("Zoom: {}.{}", rng.random_range(1..4), rng.random_range(0..10)),
        8 => format!("Age: {}", rng.random_range(1..100)),
        9 => format!("Sex: {}", pick(rng, &["M", "F"])),
        10 => format!("Study ID: {}", digits(rng, 4)),
        11 => format!("Series: {}", rng.random_range(1..20)),
        12 => format!("Img: {}", rng.random_range(1..500)),
        _ => pick(rng, PLACEHOLDERS).to_string(),
    }
}

pub fn days_in_month(year: u32, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if (year.is_multiple_of(4) && !year.is_multiple_of(100)) || year.is_multiple_of(400) => 29,
        2 => 28,
        _ => 0,
    }
}

/// Whether an 8-digit token is a plausible YYYYMMDD calendar date.
pub fn is_valid_date(token: &str) -> bool {
    if token.len() != 8 || !token.bytes().all(|b| b.is_ascii_digit()) {
        return false;
    }
    let year: u32 = token[0..4].parse().unwrap_or(0);
    let month: u32 = token[4..6].parse().unwrap_or(0);
    let day: u32 = token[6..8].parse().unwrap_or(0);
    (1900..=2099).contains(&year) && (1..=12).contains(&month) && day >= 1 && day <= days_in_month(year, month)
}

struct Patterns {
    email: Regex,
    phone: Regex,
    eight_digits: Regex,
    identifier: Regex,
    address: Regex,
    word: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        email: Regex::new(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}").unwrap(),
        phone: Regex::new(r"(?:\(\d{3}\) |\b\d{3}-)\d{3}-\d{4}\b").unwrap(),
        eight_digits: Regex::new(r"\b\d{8}\b").unwrap(),
        identifier: Regex::new(r"(?i)\b(?:MRN|Patient ID|PID)\b:?\s*[A-Z]{0,2}\d{6,7}\b").unwrap(),
        address: Regex::new(r"\b\d{1,5} [A-Z][a-z]+ (?:St|Ave|Rd|Blvd|Ln|Dr)\b").unwrap(),
        word: Regex::new(r"[A-Za-z]+").unwrap(),
    })
}

/// Outcome of pattern classification of one text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    pub category: Option<PhiCategory>,
    pub rationale: &'static str,
}

pub fn classify(text: &str) -> Classification {
    let p = patterns();
    let hit = |category, rationale| Classification { category: Some(category), rationale };
    if p.email.is_match(text) {
        return hit(PhiCategory::Email, "contains an email address");
    }
    if p.phone.is_match(text) {
        return hit(PhiCategory::Phone, "contains a phone number");
    }
    if p.eight_digits.find_iter(text).any(|m| is_valid_date(m.as_str())) {
        return hit(PhiCategory::Date, "contains a calendar date in YYYYMMDD form");
    }
    if p.identifier.is_match(text) {
        return hit(PhiCategory::Identifier, "contains a patient identifier");
    }
    if p.address.is_match(text) {
        return hit(PhiCategory::Address, "contains a street address");
    }
    let is_name = p.word.find_iter(text).any(|w| {
        let w = w.as_str();
        FIRST_NAMES.iter().chain(LAST_NAMES).any(|n| n.eq_ignore_ascii_case(w))
    });
    if is_name {
        return hit(PhiCategory::Name, "contains a person name");
    }
    let upper = text.trim().to_ascii_uppercase();
    if PLACEHOLDERS.iter().any(|ph| *ph == upper) {
        return Classification { category: None, rationale: "placeholder label without a value" };
    }
    Classification { category: None, rationale: "technical or non-identifying text" }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_texts_classify_as_their_category() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            for cat in PhiCategory::ALL {
                let t = synth_phi(&mut rng, cat);
                assert_eq!(classify(&t).category, Some(cat), "{t}");
            }
            let t = synth_non_phi(&mut rng, "CT");
            assert_eq!(classify(&t).category, None, "{t}");
        }
    }

    #[test]
    fn examples_from_the_tagging_format() {
        assert_eq!(classify("Patient name: John Doe").category, Some(PhiCategory::Name));
        assert_eq!(classify("Age: 24").category, None);
        assert_eq!(classify("PATIENT NAME").category, None);
        assert_eq!(classify("PATIENT NAME").rationale, "placeholder label without a value");
        assert_eq!(classify("Study ID: 4711").category, None);
    }

    #[test]
    fn confused_date_is_no_longer_a_date() {
        assert!(is_valid_date("20160730"));
        assert!(!is_valid_date("28168730"));
        assert_eq!(classify("28168730").category, None);
        assert!(!is_valid_date("20230229"));
        assert!(is_valid_date("20240229"));
    }
}
