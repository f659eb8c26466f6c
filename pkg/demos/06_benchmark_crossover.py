"""Where does the queued parallel device out-run the synchronous reference?

The same sweep is available from the command line:

    devmat-bench --task matmul --sizes 64,128,256,512,1024 --trials 3 \
                 --out matmul.csv --report crossover.txt
"""

from devmat.bench import BenchConfig, crossover_report, records_to_csv, run_task

sizes = (64, 128, 256, 512, 1024)

records = run_task(BenchConfig(task="matmul", sizes=sizes, dtype="f32",
                               backend="reference", trials=3, seed=42))
records += run_task(BenchConfig(task="matmul", sizes=sizes, dtype="f32",
                                backend="parallel", trials=3, seed=42))

text, status = crossover_report(records)
print(text)
print("exit status would be:", status)

print("CSV head:")
for line in records_to_csv(records).splitlines()[:4]:
    print(" ", line)
