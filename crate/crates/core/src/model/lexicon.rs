/// Coarse part-of-speech suffix used in lexical-unit names.
pub fn coarse_pos(tag: &str) -> &'static str {
    match tag {
        t if t.starts_with("NN") => "n",
        t if t.starts_with("VB") || t == "MD" => "v",
        t if t.starts_with("JJ") => "a",
        t if t.starts_with("RB") || t == "RP" || t == "WRB" => "adv",
        "IN" | "TO" => "prep",
        "CD" => "num",
        "DT" | "PDT" | "WDT" => "art",
        "CC" => "c",
        "UH" => "intj",
        t if t.starts_with("PRP") || t.starts_with("WP") => "pron",
        _ => "x",
    }
}

/// Lexical-unit key of a target: lowercased words joined by spaces, a dot,
/// and the coarse category of the first word.
pub fn lu_key(tokens: &[String], pos: &[String], target: &[usize]) -> String {
    let words: Vec<String> = target.iter().map(|&i| tokens[i].to_lowercase()).collect();
    let category = target.first().map_or("x", |&i| coarse_pos(&pos[i]));
    format!("{}.{category}", words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn keys() {
        let tokens = strings(&["She", "Picked", "the", "box", "up"]);
        let pos = strings(&["PRP", "VBD", "DT", "NN", "RP"]);
        assert_eq!(lu_key(&tokens, &pos, &[1, 4]), "picked up.v");
        assert_eq!(lu_key(&tokens, &pos, &[3]), "box.n");
        assert_eq!(lu_key(&tokens, &pos, &[0]), "she.pron");
        assert_eq!(coarse_pos("JJR"), "a");
        assert_eq!(coarse_pos("SYM"), "x");
    }
}
