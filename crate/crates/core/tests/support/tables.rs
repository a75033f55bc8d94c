//! Reference rank tables for the patient-characteristics category.

pub const MODELS: [&str; 10] = [
    "ECGFounder",
    "ECG-JEPA",
    "ST-MEM",
    "MERL",
    "ECGFM-KED",
    "HuBERT-ECG",
    "ECG-FM",
    "ECG-CPC",
    "S4",
    "Net1D",
];

/// Per task, per model: (finetuned, frozen, linear) ranks.
pub const PATIENT_RANKS: [(&str, [[u32; 3]; 10]); 6] = [
    ("Sex", [[5, 6, 4], [6, 3, 2], [8, 4, 2], [2, 4, 7], [6, 8, 9], [10, 8, 9], [2, 10, 7], [1, 1, 4], [2, 1, 1], [9, 6, 4]]),
    ("Age", [[5, 5, 4], [5, 3, 2], [8, 4, 3], [3, 5, 7], [5, 10, 10], [10, 8, 8], [1, 8, 8], [2, 2, 6], [4, 1, 1], [9, 7, 5]]),
    ("Biometrics", [[5, 6, 6], [5, 6, 3], [8, 3, 2], [2, 3, 7], [7, 9, 9], [10, 6, 8], [2, 10, 10], [1, 2, 3], [2, 1, 1], [9, 3, 3]]),
    ("ECG Features", [[3, 5, 3], [4, 3, 4], [9, 5, 5], [5, 8, 8], [7, 9, 9], [10, 7, 7], [5, 9, 10], [1, 2, 6], [2, 1, 1], [8, 4, 2]]),
    ("Lab Values", [[5, 6, 4], [1, 3, 6], [6, 9, 2], [1, 5, 6], [6, 8, 9], [10, 6, 8], [6, 10, 10], [1, 1, 2], [1, 1, 1], [9, 3, 4]]),
    ("Vital Signs", [[6, 4, 5], [3, 4, 5], [9, 9, 3], [3, 4, 8], [6, 8, 9], [9, 7, 7], [3, 10, 10], [1, 2, 2], [1, 1, 1], [8, 3, 3]]),
];

/// Reference category medians (finetuned, frozen, linear).
pub const PATIENT_MEDIANS: [[f64; 3]; 10] = [
    [5.0, 5.5, 4.0],
    [4.5, 3.0, 3.5],
    [8.0, 4.5, 2.5],
    [2.5, 4.5, 7.0],
    [6.0, 8.5, 9.0],
    [10.0, 7.0, 8.0],
    [2.5, 9.5, 10.0],
    [1.0, 2.0, 3.5],
    [2.0, 1.0, 1.0],
    [9.0, 3.5, 3.5],
];

/// PTB finetuned ranks.
pub const PTB_FINETUNED: [usize; 10] = [1, 1, 1, 1, 8, 1, 1, 1, 8, 10];
