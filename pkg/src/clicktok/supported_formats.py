available = {
    # 'name': ('module','class','mode'),
    'wav': ('audio', 'Wav', 'rw'),  # PCM16 / float32 WAV
    'codec': ('codec', 'CodecFile', 'rw'),  # tokenizer checkpoint
    'matm': ('matm', 'MatmFile', 'rw'),  # masked token model checkpoint
    'lora': ('matm', 'LoraFile', 'rw'),  # low-rank adapter checkpoint
    'manifest': ('synthdata', 'ManifestFile', 'rw'),  # corpus manifest
    'ratings': ('eval.kappa', 'RatingsFile', 'ro'),  # rater counts
    '.wav': ('audio', 'Wav', 'rw'),
    '.codec': ('codec', 'CodecFile', 'rw'),
    '.matm': ('matm', 'MatmFile', 'rw'),
    '.lora': ('matm', 'LoraFile', 'rw'),
    '.json': ('synthdata', 'ManifestFile', 'rw'),
    '.csv': ('eval.kappa', 'RatingsFile', 'ro'),
}
