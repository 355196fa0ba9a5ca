//! Bundled English word list, lengths 3 to 12 (752 entries).

pub const WORDS: &[&str] = &[
    "air", "arc", "arm", "art", "bag", "bar", "bat", "bay", "bed", "bee", "box", "boy", "bus",
    "can", "cap", "car", "cat", "cup", "day", "dog", "dot", "ear", "egg", "end", "eye", "fan",
    "far", "fig", "fix", "fly", "fog", "fox", "gap", "gas", "gem", "hat", "hen", "ice", "ink",
    "jam", "jar", "jet", "joy", "key", "kit", "lab", "lap", "law", "leg", "lid", "lip", "log",
    "man", "map", "mat", "mix", "mud", "net", "nut", "oak", "oar", "oil", "owl", "pan", "pen",
    "pie", "pig", "pin", "pot", "rag", "ram", "rat", "raw", "ray", "red", "rib", "rim", "rod",
    "row", "rug", "run", "sea", "set", "sky", "sun", "tab", "tag", "tan", "tap", "tar", "tea",
    "ten", "tin", "top", "toy", "van", "wax", "web", "wig", "win", "zip", "acid", "apex", "aunt",
    "axis", "band", "bark", "barn", "bath", "beam", "bell", "belt", "bird", "blue", "boat",
    "bolt", "bone", "book", "boot", "bowl", "brim", "bulk", "cake", "calm", "camp", "card",
    "cart", "cave", "cell", "chef", "chin", "city", "clay", "clip", "club", "coal", "coat",
    "code", "coin", "cold", "cone", "cork", "corn", "crab", "crew", "crop", "cube", "dawn",
    "deck", "deer", "desk", "dial", "dice", "dirt", "dish", "dock", "door", "dose", "down",
    "drum", "duck", "dusk", "dust", "east", "echo", "edge", "exam", "face", "fact", "farm",
    "fern", "fire", "fish", "flag", "flat", "foam", "fork", "fort", "frog", "fuel", "gate",
    "gear", "gift", "glow", "goat", "gold", "golf", "gray", "grid", "grip", "gulf", "hall",
    "hand", "harp", "hawk", "heat", "herb", "hill", "hint", "hive", "hood", "hook", "horn",
    "hour", "iron", "jade", "jazz", "jolt", "kelp", "kiln", "king", "kite", "knee", "knot",
    "lake", "lamb", "lamp", "land", "lane", "leaf", "lens", "lime", "line", "lion", "lock",
    "loft", "loop", "mast", "maze", "mesh", "mile", "milk", "mint", "mist", "moon", "moss",
    "moth", "nest", "news", "node", "noon", "note", "oven", "palm", "park", "path", "peak",
    "pear", "pine", "pipe", "plan", "plum", "pond", "port", "pump", "quay", "rain", "ramp",
    "reef", "rice", "ring", "road", "rock", "roof", "root", "rope", "rose", "ruby", "rust",
    "sail", "salt", "sand", "seal", "seed", "ship", "shoe", "sign", "silk", "snow", "sock",
    "soil", "song", "star", "stem", "stew", "surf", "swan", "tent", "tide", "tile", "town",
    "tree", "tusk", "vase", "vine", "wall", "wave", "well", "west", "wind", "wing", "wolf",
    "wood", "wool", "yard", "yarn", "zinc", "zone", "amber", "anchor", "apple", "apron", "arrow",
    "bacon", "badge", "basil", "beach", "bench", "birch", "blaze", "bloom", "board", "brick",
    "brook", "brush", "cabin", "cable", "canal", "canoe", "cargo", "cedar", "chalk", "chart",
    "chess", "chill", "cliff", "clock", "cloud", "clove", "coast", "coral", "creek", "crust",
    "cycle", "delta", "diner", "ditch", "dough", "draft", "eagle", "earth", "ember", "fable",
    "fence", "field", "flame", "fleet", "flint", "flora", "flour", "forge", "frost", "gauge",
    "glade", "glass", "globe", "gorge", "grain", "grape", "grass", "grove", "hazel", "heron",
    "hinge", "honey", "horse", "house", "humid", "inlet", "ivory", "jetty", "jewel", "juice",
    "knoll", "ladle", "lance", "lemon", "level", "lever", "light", "lilac", "linen", "lodge",
    "lunar", "manor", "maple", "marsh", "mason", "medal", "metal", "meter", "mince", "miner",
    "month", "mound", "mount", "mouse", "music", "ocean", "olive", "onion", "orbit", "otter",
    "paint", "paper", "peach", "pearl", "pedal", "petal", "piano", "pilot", "pivot", "plank",
    "plate", "plaza", "prism", "quill", "quilt", "radar", "radio", "raven", "ridge", "river",
    "robin", "rower", "salad", "scale", "shade", "shell", "shelf", "shore", "slate", "sleet",
    "slope", "smoke", "solar", "sound", "south", "spade", "spark", "spice", "spoon", "sport",
    "spray", "sprig", "squad", "stage", "stair", "stamp", "steam", "steel", "stone", "storm",
    "stove", "straw", "sugar", "table", "tiger", "torch", "tower", "track", "trail", "train",
    "trout", "tulip", "valve", "vapor", "vault", "venue", "vista", "wagon", "water", "wharf",
    "wheat", "wheel", "whale", "woven", "zebra", "anthem", "ballast", "basket", "beacon",
    "bobbin", "border", "bottle", "breeze", "bronze", "bucket", "burrow", "butter", "button",
    "camera", "candle", "canvas", "carbon", "carpet", "cellar", "cement", "cherry", "circle",
    "cobble", "coffee", "column", "copper", "corner", "cotton", "crayon", "cradle", "crater",
    "dagger", "decade", "docket", "dollar", "domain", "dynamo", "editor", "engine", "fabric",
    "falcon", "fiddle", "filter", "flagon", "forest", "fossil", "funnel", "galaxy", "garden",
    "garlic", "geyser", "ginger", "goblet", "gravel", "grotto", "hammer", "hamlet", "handle",
    "hearth", "hollow", "island", "jacket", "jigsaw", "jungle", "kernel", "kitten", "ladder",
    "lagoon", "legend", "lichen", "locket", "lumber", "magnet", "mallet", "mantle", "marble",
    "market", "meadow", "mirror", "morsel", "mosaic", "mussel", "needle", "nickel", "number",
    "nutmeg", "oyster", "paddle", "palace", "pebble", "pencil", "pepper", "pillow", "pigeon",
    "planet", "pollen", "poster", "pulley", "quiver", "rabbit", "raisin", "ribbon", "rocket",
    "runway", "saddle", "salmon", "scythe", "shadow", "signal", "silver", "sketch", "spruce",
    "square", "stable", "stitch", "strand", "stream", "street", "summit", "sunset", "tangle",
    "teapot", "temple", "thread", "thrush", "ticket", "timber", "tissue", "tomato", "tunnel",
    "turret", "valley", "velvet", "vessel", "violet", "violin", "walnut", "walrus", "weasel",
    "window", "winter", "wonder", "zephyr", "almanac", "antenna", "aquifer", "archway",
    "balcony", "bearing", "bicycle", "blanket", "boulder", "bracket", "cabinet", "caravan",
    "cascade", "channel", "chimney", "compass", "contour", "cottage", "crimson", "crystal",
    "curtain", "dolphin", "drizzle", "estuary", "factory", "feather", "ferment", "fixture",
    "foliage", "fortune", "freight", "gazette", "glacier", "granary", "granite", "habitat",
    "hammock", "harvest", "horizon", "journey", "lantern", "lattice", "library", "mineral",
    "monsoon", "mustard", "orchard", "pasture", "pigment", "plateau", "prairie", "pyramid",
    "quarter", "rainbow", "saffron", "satchel", "sawdust", "shelter", "spindle", "station",
    "sundial", "terrace", "thimble", "turbine", "vanilla", "village", "vinegar", "voyage",
    "walkway", "warbler", "weather", "whistle", "aqueduct", "causeway", "charcoal", "chestnut",
    "cinnamon", "driftwood", "elevator", "fieldwork", "firefly", "flagstone", "gatehouse",
    "goldfinch", "hillside", "ironwork", "keepsake", "keystone", "lakeside", "limestone",
    "milestone", "moonlight", "mountain", "notebook", "overlook", "paradise", "pendulum",
    "pipeline", "porridge", "railroad", "rainfall", "riverbank", "sailboat", "sandstone",
    "scaffold", "seashell", "shoreline", "snowdrift", "starboard", "starling", "stonework",
    "telescope", "waterfall", "watermill", "wavefront", "windmill", "blueprint", "evergreen",
    "lighthouse", "reservoir", "timberline",
];
