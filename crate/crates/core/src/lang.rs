//! Language codes used across datasets, corpora and prompts.

/// ISO-639-1 codes of the evaluation languages, plus English.
pub const KNOWN_LANGUAGES: &[&str] = &["ar", "de", "en", "es", "fi", "hi", "it", "ko", "ru", "te", "zh"];

pub fn is_known(code: &str) -> bool {
    KNOWN_LANGUAGES.contains(&code)
}

/// English display name of a language code, as used in prompt text.
pub fn display_name(code: &str) -> Option<&'static str> {
    Some(match code {
        "ar" => "Arabic",
        "bn" => "Bengali",
        "de" => "German",
        "en" => "English",
        "es" => "Spanish",
        "fi" => "Finnish",
        "fr" => "French",
        "hi" => "Hindi",
        "it" => "Italian",
        "ja" => "Japanese",
        "ko" => "Korean",
        "pt" => "Portuguese",
        "ru" => "Russian",
        "te" => "Telugu",
        "th" => "Thai",
        "vi" => "Vietnamese",
        "zh" => "Chinese",
        _ => return None,
    })
}

/// Shape check only: two lowercase ASCII letters.
pub fn is_well_formed(code: &str) -> bool {
    code.len() == 2 && code.bytes().all(|b| b.is_ascii_lowercase())
}
