def tokenize(source):
    # split into words
    tokens = []
    word = ""
    for ch in source:
        if ch.isalnum():
            word += ch
        elif word:
            tokens.append(word)
            word = ""
    if word:
        tokens.append(word)
    return tokens
# trailing comment


def exactly_ten():
    a = 1
    b = 2
    c = 3
    d = 4
    e = 5
    f = 6
    g = 7
    h = 8
    i = 9
    return a
