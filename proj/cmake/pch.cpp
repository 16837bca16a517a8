namespace { int unused_pch_anchor = 0; }
