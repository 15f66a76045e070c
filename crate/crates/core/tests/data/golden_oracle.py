"""Writes the golden preprocessing corpus and its expected outputs.

The expectations are computed here from the written cleaning rules, without
using the Rust implementation. Rerun only when a rule changes on purpose:

    python3 golden_oracle.py
"""

import csv
import hashlib
import json
import re
from pathlib import Path

HERE = Path(__file__).parent
NOTE_LENGTH = 500

SPAN = re.compile(r"\[\*\*(.*?)\*\*\]", re.S)


def classify(content):
    c = content.lower()
    if "name" in c:
        return "deidentifiedname"
    if "hospital" in c:
        return "deidentifiedhosp"
    s = c.strip()
    numeric_date = (
        any(ch.isdigit() for ch in s)
        and any(ch in "-/" for ch in s)
        and all(ch in "0123456789-/" for ch in s)
    )
    if numeric_date or any(k in c for k in ("date", "month", "year", "holiday")):
        return "deidentifieddate"
    return None


def clean(text):
    def repl(m):
        tok = classify(m.group(1))
        return " " + tok + " " if tok else " "

    out = SPAN.sub(repl, text.lower())
    out = out.replace("[**", " ").replace("**]", " ")
    return " ".join(out.split())


def keep(tok):
    if not re.fullmatch(r"[a-z0-9]+", tok):
        return False
    if re.search(r"[a-z]", tok):
        return True
    return len(tok) <= 3 and int(tok) < 1000


def tokens(cleaned):
    return [t for t in re.split(r"[^a-z0-9]", cleaned) if keep(t)]


def charted_at(date, time):
    if not date:
        return None
    return f"{date} {time or '00:00:00'}"


# (category, chart_date, chart_time, is_error, hadm_id, text)
NOTES = [
    ("Nursing", "2150-03-12", "14:05:00", "0", 100, "Seen at [**Hospital1 18**] today"),
    ("Nursing", "2150-03-12", "", "0", 100, "[**2150-3-12**] [**Known lastname 1234**]"),
    ("Nursing", "2150-03-12", "08:00:00", "", 100, "[**Pager number 555**] call"),
    ("Physician", "2150-03-12", "09:30:00", "0", 100, "pt received 24mg lasix bp 1500/90"),
    ("Physician", "2150-03-12", "10:00:00", "0", 100, "999 1000"),
    ("Nursing", "2150-03-12", "11:00:00", "0", 100, ""),
    ("Nursing", "2150-03-12", "12:00:00", "0", 100, "   \n\t  "),
    ("Radiology", "2150-03-13", "", "", 101, "CHEST (PORTABLE AP) Study Date of [**2150-3-13**] 4:12 PM"),
    ("Radiology", "2150-03-13", "", "", 101, "FINDINGS:\n\nNo pneumothorax.   Lines   unchanged."),
    ("ECG", "2150-03-13", "", "", 101, "Sinus rhythm. Rate 72. QTc 440 ms. Compared to [**2150-3-10**] no change."),
    ("Nursing", "2150-03-13", "07:15:00", "1", 101, "erroneous entry please disregard"),
    ("Nursing", "2150-03-13", "07:15:00", "true", 101, "erroneous entry with true flag"),
    ("Nursing", "2150-03-13", "07:20:00", "false", 101, "Flag spelled false keeps the note"),
    ("Discharge summary", "2150-03-20", "", "", 101, "Admission Date: [**2150-3-12**] Discharge Date: [**2150-3-20**] Service: MEDICINE"),
    ("DISCHARGE SUMMARY", "2150-03-20", "", "", 101, "Addendum by Dr. [**First Name8 (NamePattern2) 123**] [**Last Name (NamePattern1) 456**]"),
    ("Nursing", "2150-03-14", "06:00:00", "0", 102, "Duplicate note text for stay 102"),
    ("Nursing", "2150-03-14", "06:00:00", "0", 102, "Duplicate note text for stay 102"),
    ("Nursing", "2150-03-14", "06:00:01", "0", 102, "Duplicate note text for stay 102"),
    ("Nursing", "2150-03-14", "06:00:00", "0", 103, "Duplicate note text for stay 102"),
    ("Nursing", "2150-03-14", "", "0", 102, "Midnight imputed duplicate"),
    ("Nursing", "2150-03-14", "00:00:00", "0", 102, "Midnight imputed duplicate"),
    ("Nursing", "", "", "0", 102, "no chart date so the record is dropped"),
    ("Nursing", "2150-03-15", "13:00:00", "0", 104, "Transferred from [**Hospital 1234**] via [**Location (un) 86**]"),
    ("Nursing", "2150-03-15", "13:05:00", "0", 104, "Call [**Telephone/Fax (1) 8773**] or [**Numeric Identifier 5678**]"),
    ("Nursing", "2150-03-15", "13:10:00", "0", 104, "Family meeting on [**Holiday 3**] with [**Name (NI) 1**]"),
    ("Nursing", "2150-03-15", "13:15:00", "0", 104, "Seen in [**Month (only) 1**] of [**Year (4 digits) 2149**]"),
    ("Nursing", "2150-03-15", "13:20:00", "0", 104, "follow up [**Date range (1) 123**] clinic"),
    ("Nursing", "2150-03-15", "13:25:00", "0", 104, "dates [**3-12**] [**3/12/2150**] [**2150/03**] [**12**]"),
    ("Nursing", "2150-03-15", "13:30:00", "0", 104, "[**Hospital Ward Name 12**] west"),
    ("Nursing", "2150-03-15", "13:35:00", "0", 104, "unclosed [**Hospital1 18 and trailing text"),
    ("Nursing", "2150-03-15", "13:40:00", "0", 104, "stray closer **] in the middle"),
    ("Nursing", "2150-03-15", "13:45:00", "0", 104, "adjacent[**Known firstname 1**][**Hospital 2**]tokens"),
    ("Nursing", "2150-03-15", "13:50:00", "0", 104, "nested [**outer [**Name 3**] tail**] end"),
    ("Nursing", "2150-03-15", "13:55:00", "0", 104, "multi-line span [**Last\nName 9**] ok"),
    ("Physician", "2150-03-16", "09:00:00", "0", 105, "Vitals: HR 110, BP 85/50, RR 28, SpO2 92% on 4L NC"),
    ("Physician", "2150-03-16", "09:05:00", "0", 105, "Labs: Na 134 K 5.1 Cr 2.3 WBC 18.2 lactate 4.5"),
    ("Physician", "2150-03-16", "09:10:00", "0", 105, "Plat 1200 then 0999 then 000 then 0 then 1000000"),
    ("Physician", "2150-03-16", "09:15:00", "0", 105, "meds: vanc 1g q12h, zosyn 4.5g q8h, heparin 5000u sc"),
    ("Physician", "2150-03-16", "09:20:00", "0", 105, "I/O: +2.5L; UOP 30cc/hr x3h -> oliguric"),
    ("Physician", "2150-03-16", "09:25:00", "0", 105, "A&O x3, MAE, PERRL; c/o pain 7/10"),
    ("Physician", "2150-03-16", "09:30:00", "0", 105, "ABG 7.21/55/60 on FiO2 0.6 PEEP 10"),
    ("Physician", "2150-03-16", "09:35:00", "0", 105, "s/p CABG x4 in 2145, EF 25-30%"),
    ("Physician", "2150-03-16", "09:40:00", "0", 105, "Under_score and hyphen-ated and dot.ted words"),
    ("Physician", "2150-03-16", "09:45:00", "0", 105, "Café naïve résumé accents split tokens"),
    ("Physician", "2150-03-16", "09:50:00", "0", 105, "MIXED case TeXt Is LOWERED"),
    ("Physician", "2150-03-16", "09:55:00", "0", 105, "tabs\tand\r\nwindows\rline   breaks"),
    ("Physician", "2150-03-16", "10:00:00", "0", 105, "12:30 pm 2 units prbc given @ 0300"),
    ("Physician", "2150-03-16", "10:05:00", "0", 105, "abc123def 123abc abc123 1a2b3c"),
    ("Physician", "2150-03-16", "10:10:00", "0", 105, "#1 sepsis #2 ARF #3 AMS"),
    ("Physician", "2150-03-16", "10:15:00", "0", 105, "!!! ??? ... --- ***"),
    ("Physician", "2150-03-16", "10:20:00", "0", 105, "1000 1001 9999 10000"),
    ("Physician", "2150-03-16", "10:25:00", "0", 105, "1 22 333 4444 55555"),
    ("Social Work", "2150-03-17", "", "0", 106, "Spoke with pt's daughter [**Name (NI) 4**] at [**Hospital3 7**] re: DNR/DNI"),
    ("Case Management", "2150-03-17", "", "0", 106, "Dispo to rehab; insurance [**Company 88**] approved"),
    ("Nutrition", "2150-03-17", "", "0", 106, "TF @ 60ml/hr goal 65ml/hr; Kcal 1800 protein 90g"),
    ("Rehab Services", "2150-03-17", "", "0", 106, "PT eval: amb 20ft w/ RW, min assist"),
    ("Respiratory", "2150-03-17", "23:59:59", "0", 106, "Vent: AC 500x14 PEEP 5 FiO2 40%"),
    ("Nursing/other", "2150-03-18", "00:00:01", "0", 106, "Turned q2h; skin intact; [**Doctor Last Name 5**] aware"),
    ("Nursing", "2150-03-18", "04:00:00", "0", 106, " ".join(f"w{i}" for i in range(600))),
    ("Nursing", "2150-03-18", "04:05:00", "0", 106, " ".join(f"x{i}" for i in range(500))),
    ("Nursing", "2150-03-18", "04:10:00", "0", 106, " ".join(["a"] * 499 + ["1500", "b", "c"])),
    ("Nursing", "2150-03-18", "04:15:00", "0", 106, "2000 3000 / 4000 ; 5000"),
]


def main():
    rows = []
    for i, (cat, date, time, err, hadm, text) in enumerate(NOTES):
        rows.append(
            {
                "row_id": 1000 + i,
                "subject_id": 7 if hadm < 104 else 8,
                "hadm_id": hadm,
                "category": cat,
                "chart_date": date,
                "chart_time": time,
                "is_error": err,
                "text": text,
            }
        )
    with open(HERE / "golden_notes.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    seen = set()
    expected = []
    for r in sorted(rows, key=lambda r: r["row_id"]):
        at = charted_at(r["chart_date"], r["chart_time"])
        error = r["is_error"] in ("1", "true")
        key = (r["hadm_id"], at, hashlib.sha256(r["text"].encode()).hexdigest())
        embedding = not error and at is not None and key not in seen
        if embedding:
            seen.add(key)
        discharge = r["category"].strip().lower() == "discharge summary"
        cleaned = clean(r["text"])
        toks = tokens(cleaned)
        expected.append(
            {
                "row_id": r["row_id"],
                "charted_at": at,
                "embedding_corpus": embedding,
                "model_corpus": embedding and not discharge,
                "cleaned": cleaned,
                "tokens": toks,
                "kept": toks[:NOTE_LENGTH],
            }
        )
    with open(HERE / "golden_expected.jsonl", "w") as f:
        for e in expected:
            f.write(json.dumps(e) + "\n")


if __name__ == "__main__":
    main()
