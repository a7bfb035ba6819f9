"""Reference occurrence counts, integer percentages and per-class AP columns."""

TABLE2_COUNTS = (3367, 2798, 2362, 897, 860)
TABLE2_PCT = (33, 27, 23, 9, 8)
TABLE3_COUNTS = (3636, 2912, 2891, 1418, 1482)
TABLE3_PCT = (29, 24, 23, 12, 12)
TABLE5_COUNTS = (3636, 2912, 2891, 2523, 2587)
TABLE5_PCT = (25, 20, 20, 17, 18)

TABLE4_AP_3M = (1.00, 1.00, 0.96, 0.27, 0.99)
TABLE4_AP_5M = (1.00, 1.00, 0.89, 0.21, 0.76)
TABLE5_AP_3M = (1.00, 1.00, 0.98, 0.97, 0.99)
TABLE5_AP_5M = (1.00, 1.00, 0.91, 0.59, 0.94)
