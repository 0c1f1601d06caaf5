//! Label sets of the articulation tasks.

pub const NATO: [&str; 26] = [
    "Alfa", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot", "Golf", "Hotel", "India", "Juliette",
    "Kilo", "Lima", "Mike", "November", "Oscar", "Papa", "Quebec", "Romeo", "Sierra", "Tango",
    "Uniform", "Victor", "Whiskey", "X-ray", "Yankee", "Zulu",
];

pub const GESTURES: [&str; 13] = [
    "cheeks-puff-out",
    "cheeks-suck-in",
    "jaw-dropdown",
    "jaw-move-backward",
    "jaw-move-forward",
    "jaw-move-left",
    "jaw-move-right",
    "lips-pucker",
    "lips-smile",
    "lips-tuck",
    "tongue-back-of-lower-teeth",
    "tongue-back-of-upper-teeth",
    "tongue-roof-of-mouth",
];

pub const WORDS: [&str; 36] = [
    "eager", "lift", "eight", "edge", "cap", "matted", "tub", "box", "rune", "rook", "folder",
    "block", "fun", "mop", "pod", "very", "went", "throat", "this", "tango", "doubt", "not",
    "pretty", "xerox", "rodent", "limb", "batch", "jeep", "ship", "beige", "yes", "echo", "gold",
    "sing", "uh-oh", "hiccup",
];

pub const CONSONANTS: [&str; 23] = [
    "Baa", "Paa", "Maa", "Faa", "Vaa", "Thaa", "Dhaa", "Taa", "Daa", "Naa", "Saa", "Zaa", "Chaa",
    "Shaa", "Jhaa", "Zhaa", "Kaa", "Gaa", "NGaa", "Yaa", "Raa", "Laa", "Waa",
];

pub const VOWELS: [&str; 15] =
    ["OY", "OW", "AO", "AA", "AW", "AY", "AE", "EH", "EY", "IY", "IH", "AH", "UW", "ER", "UH"];

/// Consonants followed by vowels and diphthongs.
pub fn phonemes() -> Vec<&'static str> {
    CONSONANTS.iter().chain(VOWELS.iter()).copied().collect()
}

/// Named vocabulary lookup: `nato`, `gestures`, `words`, `phonemes`,
/// `consonants`, `vowels`.
pub fn by_name(name: &str) -> Option<Vec<&'static str>> {
    Some(match name {
        "nato" => NATO.to_vec(),
        "gestures" => GESTURES.to_vec(),
        "words" => WORDS.to_vec(),
        "phonemes" => phonemes(),
        "consonants" => CONSONANTS.to_vec(),
        "vowels" => VOWELS.to_vec(),
        _ => return None,
    })
}
